mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use common::snapshot;
use textcam::tensor_io::{write_bundle, Role, Tensor, TensorBundle};

fn textcam(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_textcam"))
        .args(args)
        .env("TEXTCAM_THREADS", "1")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn ok(args: &[&str]) {
    let (code, err) = textcam(args);
    assert_eq!(code, 0, "{args:?}: {err}");
}

/// Synthetic data plus a channel table, built once per test binary.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_fixture");
        let _ = fs::remove_dir_all(&dir);
        let d = dir.to_str().unwrap();
        ok(&["synth-clevr", "--out", d, "--n-per-class", "60"]);
        ok(&["channel-semantics", "--reference", &format!("{d}/reference"), "--out", &format!("{d}/table"), "--m-extremes", "30"]);
        dir
    })
}

fn at(name: &str) -> String {
    fixture().join(name).to_str().unwrap().to_string()
}

fn explain_args<'a>(cmd: &'a str, image: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        cmd.into(),
        "--image".into(),
        image.into(),
        "--table".into(),
        at("table"),
        "--vocab".into(),
        at("concepts"),
        "--phrases".into(),
        at("concepts.txt"),
        "--out".into(),
        out.into(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run(v: &[String]) -> (i32, String) {
    textcam(&v.iter().map(String::as_str).collect::<Vec<_>>())
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn single_group_map_equals_the_full_map() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let image = at("image_shape");
    assert_eq!(run(&explain_args("group", &image, out, &["--topk", "1"])).0, 0);
    let groups = json(tmp.path().join("groups.json"));
    let files = groups["files"].as_array().unwrap();
    assert_eq!(files.len(), 1);
    let group_png = fs::read(tmp.path().join(files[0].as_str().unwrap())).unwrap();
    assert_eq!(group_png, fs::read(tmp.path().join("saliency.png")).unwrap());
}

#[test]
fn short_phrase_list_when_k_exceeds_positives() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let image = at("image_color");
    assert_eq!(run(&explain_args("explain", &image, out, &["--topk", "50"])).0, 0);
    let phrases = json(tmp.path().join("phrases.json"));
    let listed = phrases["phrases"].as_array().unwrap().len();
    let nonzero = json(tmp.path().join("solution.json"))["nonzero"].as_u64().unwrap() as usize;
    assert!(listed >= 1 && listed < 50);
    assert_eq!(listed, nonzero);
}

#[test]
fn ablation_mask_is_bounded_and_eval_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let eval = |o: &str| {
        ok(&[
            "eval",
            "--features",
            &at("test_features"),
            "--table",
            &at("table"),
            "--concepts",
            &at("concepts"),
            "--concept-names",
            &at("concepts.txt"),
            "--labels",
            &at("test_labels.tsv"),
            "--ablate-topk",
            "64",
            "--seed",
            "7",
            "--out",
            o,
        ])
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    eval(a.to_str().unwrap());
    eval(b.to_str().unwrap());
    assert_eq!(snapshot(&a), snapshot(&b));
    let report = json(a.join("eval.json"));
    let size = report["ablation"]["mask_size"].as_u64().unwrap();
    assert!((64..=192).contains(&size), "{size}");
}

#[test]
fn partition_fault_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let image = at("image_shape");
    let (code, err) = run(&explain_args("group", &image, out, &["--inject-partition-fault"]));
    assert_eq!(code, 4, "{err}");
}

#[test]
fn missing_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    let table = at("table");
    let (code, err) = run(&explain_args("explain", &table, out, &[]));
    assert_eq!(code, 2);
    assert!(err.contains("activation"), "{err}");
    let missing = tmp.path().join("nothing");
    assert_eq!(run(&explain_args("explain", missing.to_str().unwrap(), out, &[])).0, 2);
    assert_eq!(textcam(&["no-such-command"]).0, 2);
    assert_eq!(textcam(&["explain", "--image"]).0, 2);
}

#[test]
fn channel_count_mismatch_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let (n, d, dim) = (40, 5, 16);
    let mut reference = TensorBundle::new();
    let emb: Vec<f32> = (0..n * dim).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
    let scores: Vec<f32> = (0..n * d).map(|i| (i * 13 % 17) as f32).collect();
    reference
        .insert("image_embeddings", Role::ClipImageEmbedding, Tensor::new(vec![n, dim], emb).unwrap())
        .unwrap();
    reference
        .insert("scores", Role::Activation, Tensor::new(vec![n, d], scores).unwrap())
        .unwrap();
    let ref_dir = tmp.path().join("reference");
    write_bundle(&reference, &ref_dir).unwrap();
    let table = tmp.path().join("table");
    ok(&["channel-semantics", "--reference", ref_dir.to_str().unwrap(), "--out", table.to_str().unwrap(), "--m-extremes", "10"]);
    let out = tmp.path().join("o");
    let mut args = explain_args("explain", "", out.to_str().unwrap(), &[]);
    args[2] = at("image_shape");
    args[4] = table.to_str().unwrap().into();
    let (code, err) = run(&args);
    assert_eq!(code, 3, "{err}");
}
