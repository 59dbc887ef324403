//! `textcam` command-line entry point.
//!
//! Exit codes: 0 success, 2 missing input, 3 shape mismatch, 4 internal
//! invariant violation, 5 I/O failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::cam::{
    gap, render, saliency, weights_from_gradients, weights_from_head, ActivationStack, ChannelWeights, Colormap,
    GradientMode, WeightSource,
};
use crate::concept::ConceptBank;
use crate::error::{Error, Result};
use crate::grouping::{greedy_relocate, group_saliency, GroupingProblem, DEFAULT_MAX_SWEEPS};
use crate::protocol::{ablation_report, explain_head, AblationReport, HeadReport, LinearHead};
use crate::semantics::{
    build_table, semantic_representation, weighted_semantic_vectors, ChannelSemanticsConfig, ChannelSemanticsTable,
    ReferenceSet,
};
use crate::sparse::{admm_solve, top_k_phrases, SelectedPhrase, SparseSelectConfig, VocabularyBank};
use crate::synth::{self, SynthData};
use crate::tensor_io::{read_bundle, write_bundle, Role, Tensor, TensorBundle};
use crate::write_atomic;

/// Relative tolerance for the group-map partition check.
const PARTITION_RTOL: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "textcam", version, about = "Text explanations for class activation maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Precompute per-channel semantic directions from a reference pool.
    ChannelSemantics(ChannelSemanticsArgs),
    /// Explain one image: saliency map plus selected phrases.
    Explain(ExplainArgs),
    /// Explain one image and split its saliency map by selected phrase.
    Group(GroupArgs),
    /// Concept accuracy and color-ablation report over a feature set.
    Eval(EvalArgs),
    /// Write a synthetic color-biased shape dataset as bundles.
    SynthClevr(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ChannelSemanticsArgs {
    /// Reference bundle: per-image channel scores (`activation`, `[n, d]` or
    /// `[n, d, H, W]`) and image embeddings (`clip_image_embedding`, `[n, D]`).
    #[arg(long)]
    pub reference: PathBuf,
    /// Output table bundle.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub m_extremes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub shrinkage: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightChoice {
    /// `channel_weights` tensor if present, else gradients, else head.
    Auto,
    Head,
    Gradcam,
    Layercam,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ColormapChoice {
    Gray,
    Jet,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Image bundle with an `activation` tensor `[d, H, W]` and a weight source.
    #[arg(long)]
    pub image: PathBuf,
    /// Channel table written by `channel-semantics`.
    #[arg(long)]
    pub table: PathBuf,
    /// Vocabulary bundle holding a `clip_text_embedding` tensor `[D, N]`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Phrase list, one per line, aligned with the embedding columns.
    #[arg(long)]
    pub phrases: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = WeightChoice::Auto)]
    pub weights: WeightChoice,
    /// Class to explain; defaults to the bundle's `class_index` metadata, else 0.
    #[arg(long = "class")]
    pub class_index: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub rho: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
    #[arg(long, default_value_t = 224)]
    pub render_height: usize,
    #[arg(long, default_value_t = 224)]
    pub render_width: usize,
    #[arg(long, value_enum, default_value_t = ColormapChoice::Gray)]
    pub colormap: ColormapChoice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GroupArgs {
    #[command(flatten)]
    pub explain: ExplainArgs,
    #[arg(long, default_value_t = DEFAULT_MAX_SWEEPS)]
    pub max_sweeps: usize,
    #[arg(long, hide = true)]
    pub inject_partition_fault: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Bundle with pooled features (`feature_vector`, `[n, d]`) and linear
    /// heads (`head_weights`, `[C, d]`, class names in metadata `classes.<head>`).
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    /// Concept bundle holding a `clip_text_embedding` tensor `[D, K]`.
    #[arg(long)]
    pub concepts: PathBuf,
    /// Concept names, one per line.
    #[arg(long)]
    pub concept_names: PathBuf,
    /// Tab-separated labels: a header naming the heads, then one row per image.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
    /// Per-class top-K of the probe to ablate; no ablation when absent.
    #[arg(long)]
    pub ablate_topk: Option<usize>,
    /// Probe tensor (role `head_weights`) used to mine the mask.
    #[arg(long, default_value = "color_probe")]
    pub probe: String,
    /// Head evaluated before and after ablation.
    #[arg(long, default_value = "shape")]
    pub ablate_head: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub n_per_class: usize,
    /// Color bias of the training split.
    #[arg(long, default_value_t = 0.9)]
    pub bias: f64,
    /// Color bias of the test split (1/3 is color-balanced).
    #[arg(long, default_value_t = 1.0 / 3.0)]
    pub test_bias: f64,
    /// Spatial size of the single-image activation bundles.
    #[arg(long, default_value_t = 7)]
    pub grid: usize,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("TEXTCAM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // Fails only if a pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ChannelSemantics(a) => cmd_channel_semantics(&a),
        Command::Explain(a) => cmd_explain(&a).map(|_| ()),
        Command::Group(a) => cmd_group(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::SynthClevr(a) => cmd_synth(&a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::invariant(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- channel-semantics

/// Per-image channel scores from an `activation` tensor: `[n, d]` is taken
/// as already pooled, `[n, d, H, W]` is pooled here.
fn reference_scores(t: &Tensor) -> Result<DMatrix<f64>> {
    match *t.shape() {
        [_, _] => t.to_matrix(),
        [n, d, h, w] => {
            let data = t.data();
            let hw = h * w;
            Ok(DMatrix::from_fn(n, d, |i, j| {
                let start = (i * d + j) * hw;
                data[start..start + hw].iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64
            }))
        }
        ref other => Err(Error::shape(format!(
            "reference activations must be [n, d] or [n, d, H, W], got {other:?}"
        ))),
    }
}

pub fn cmd_channel_semantics(args: &ChannelSemanticsArgs) -> Result<()> {
    let cfg = ChannelSemanticsConfig {
        m_extremes: args.m_extremes,
        shrinkage: args.shrinkage,
    };
    cfg.validate()?;
    let bundle = read_bundle(&args.reference)?;
    let (_, scores) = bundle.find_role(Role::Activation, Some("scores"))?;
    let (_, embeddings) = bundle.find_role(Role::ClipImageEmbedding, Some("image_embeddings"))?;
    let reference = ReferenceSet::new(embeddings.to_matrix()?, reference_scores(scores)?)?;
    let table = build_table(&reference, &cfg)?;
    let out = table
        .to_bundle(&cfg)
        .with_metadata("seed", args.seed.to_string())
        .with_metadata("reference_images", reference.len().to_string());
    write_bundle(&out, &args.out)?;
    println!(
        "channels: {}  degenerate: {}  embedding dim: {}",
        table.channels(),
        table.degenerate_count(),
        table.embedding_dim()
    );
    Ok(())
}

// ---------------------------------------------------------------- explain

#[derive(Debug, Serialize)]
struct ExplainConfig {
    alpha: f64,
    alpha_requested: Option<f64>,
    beta: f64,
    rho_requested: f64,
    rho: f64,
    tol: f64,
    max_iter: usize,
    topk: usize,
    class_index: usize,
    weight_source: WeightSource,
    m_extremes: Option<String>,
    shrinkage: Option<String>,
    render_height: usize,
    render_width: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_sweeps: Option<usize>,
}

#[derive(Debug, Serialize)]
struct PhrasesReport<'a> {
    config: &'a ExplainConfig,
    phrases: &'a [SelectedPhrase],
}

#[derive(Debug, Serialize)]
struct SolutionReport<'a> {
    config: &'a ExplainConfig,
    converged: bool,
    iterations: usize,
    objective: f64,
    polished: bool,
    support_moves: usize,
    primal_residual: f64,
    dual_residual: f64,
    nonzero: usize,
    weight_sum: f64,
    max_weight: f64,
    target_norm: f64,
    degenerate_channels: usize,
}

/// Everything `explain` computes, reused by `group`.
struct Explanation {
    stack: ActivationStack,
    weights: ChannelWeights,
    table: ChannelSemanticsTable,
    bank: VocabularyBank,
    scores: Vec<f64>,
    phrases: Vec<SelectedPhrase>,
    config: ExplainConfig,
}

fn metadata_class(bundle: &TensorBundle) -> Result<Option<usize>> {
    bundle
        .metadata
        .get("class_index")
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::invariant(format!("metadata class_index {v:?} is not an index")))
        })
        .transpose()
}

fn load_weights(
    bundle: &TensorBundle,
    stack: &ActivationStack,
    choice: WeightChoice,
    class_override: Option<usize>,
) -> Result<ChannelWeights> {
    let class = match class_override {
        Some(c) => c,
        None => metadata_class(bundle)?.unwrap_or(0),
    };
    let has = |role| bundle.with_role(role).next().is_some();
    let choice = match choice {
        WeightChoice::Auto if has(Role::ChannelWeights) => WeightChoice::External,
        WeightChoice::Auto if has(Role::Gradient) => WeightChoice::Gradcam,
        WeightChoice::Auto if has(Role::HeadWeights) => WeightChoice::Head,
        WeightChoice::Auto => {
            return Err(Error::MissingTensor {
                role: "channel_weights, gradient or head_weights".into(),
                name: None,
            })
        }
        other => other,
    };
    let weights = match choice {
        WeightChoice::External => {
            let (_, t) = bundle.find_role(Role::ChannelWeights, None)?;
            ChannelWeights::new(t.to_vector()?.iter().copied().collect(), class, WeightSource::External)?
        }
        WeightChoice::Head => {
            let (_, t) = bundle.find_role(Role::HeadWeights, None)?;
            weights_from_head(&t.to_matrix()?, class)?
        }
        WeightChoice::Gradcam | WeightChoice::Layercam => {
            let (_, t) = bundle.find_role(Role::Gradient, None)?;
            let grads = ActivationStack::from_tensor(&squeeze_batch(t)?)?;
            let mode = if choice == WeightChoice::Gradcam {
                GradientMode::Gradcam
            } else {
                GradientMode::Layercam
            };
            weights_from_gradients(stack, &grads, mode, class)?
        }
        WeightChoice::Auto => unreachable!("resolved above"),
    };
    if weights.len() != stack.channels() {
        return Err(Error::shape(format!(
            "{} channel weights for {} channels",
            weights.len(),
            stack.channels()
        )));
    }
    Ok(weights)
}

/// Drops a leading batch dimension of 1 from a `[1, d, H, W]` tensor.
fn squeeze_batch(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [1, d, h, w] => Tensor::new(vec![d, h, w], t.data().to_vec()),
        _ => Ok(t.clone()),
    }
}

fn explain_core(args: &ExplainArgs, max_sweeps: Option<usize>) -> Result<Explanation> {
    let image = read_bundle(&args.image)?;
    let (_, act) = image.find_role(Role::Activation, Some("activations"))?;
    let stack = ActivationStack::from_tensor(&squeeze_batch(act)?)?;
    let weights = load_weights(&image, &stack, args.weights, args.class_index)?;

    let table_bundle = read_bundle(&args.table)?;
    let table = ChannelSemanticsTable::from_bundle(&table_bundle)?;
    if table.channels() != stack.channels() {
        return Err(Error::shape(format!(
            "table has {} channels, image has {}",
            table.channels(),
            stack.channels()
        )));
    }
    let vocab_bundle = read_bundle(&args.vocab)?;
    let bank = VocabularyBank::load(&vocab_bundle, None, &args.phrases)?;

    let scores = gap(&stack);
    let target = semantic_representation(&table, &scores, &weights)?;
    let cfg = SparseSelectConfig {
        alpha: args.alpha,
        beta: args.beta,
        rho: args.rho,
        tol: args.tol,
        max_iter: args.max_iter,
        top_k: args.topk,
    };
    let solution = admm_solve(&target.vector, &bank, &cfg)?;
    let phrases = top_k_phrases(&solution.weights, &bank, args.topk);

    let config = ExplainConfig {
        alpha: solution.alpha,
        alpha_requested: args.alpha,
        beta: args.beta,
        rho_requested: args.rho,
        rho: solution.rho,
        tol: args.tol,
        max_iter: args.max_iter,
        topk: args.topk,
        class_index: weights.class_index,
        weight_source: weights.source,
        m_extremes: table_bundle.metadata.get("m_extremes").cloned(),
        shrinkage: table_bundle.metadata.get("shrinkage").cloned(),
        render_height: args.render_height,
        render_width: args.render_width,
        seed: args.seed,
        max_sweeps,
    };

    ensure_dir(&args.out)?;
    let colormap = colormap(args.colormap);
    let full = saliency(&stack, &weights)?;
    render(&full, args.render_height, args.render_width, colormap)?.write_png(args.out.join("saliency.png"))?;
    write_json(
        &args.out.join("phrases.json"),
        &PhrasesReport {
            config: &config,
            phrases: &phrases,
        },
    )?;
    let w = &solution.weights;
    write_json(
        &args.out.join("solution.json"),
        &SolutionReport {
            config: &config,
            converged: solution.converged,
            iterations: solution.iterations,
            objective: solution.objective,
            polished: solution.polished,
            support_moves: solution.support_moves,
            primal_residual: solution.primal_residual,
            dual_residual: solution.dual_residual,
            nonzero: w.iter().filter(|&&v| v > crate::sparse::POSITIVE_EPS).count(),
            weight_sum: w.sum(),
            max_weight: w.max(),
            target_norm: target.vector.norm(),
            degenerate_channels: table.degenerate_count(),
        },
    )?;
    Ok(Explanation {
        stack,
        weights,
        table,
        bank,
        scores,
        phrases,
        config,
    })
}

fn colormap(choice: ColormapChoice) -> Colormap {
    match choice {
        ColormapChoice::Gray => Colormap::Gray,
        ColormapChoice::Jet => Colormap::Jet,
    }
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<()> {
    let ex = explain_core(args, None)?;
    for p in &ex.phrases {
        println!("{:.6}\t{}", p.weight, p.phrase);
    }
    Ok(())
}

// ---------------------------------------------------------------- group

#[derive(Debug, Serialize)]
struct GroupsReport<'a> {
    config: &'a ExplainConfig,
    groups: Vec<Vec<usize>>,
    phrases: Vec<&'a str>,
    objective: f64,
    sweeps: usize,
    moves: usize,
    converged: bool,
    files: Vec<String>,
}

/// Lowercase ASCII alphanumerics with runs of anything else collapsed to `-`.
pub fn slug(phrase: &str) -> String {
    let mut out = String::new();
    for ch in phrase.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("phrase");
    }
    out
}

pub fn cmd_group(args: &GroupArgs) -> Result<()> {
    let ex = explain_core(&args.explain, Some(args.max_sweeps))?;
    if ex.phrases.is_empty() {
        return Err(Error::invariant("no phrase received positive weight; nothing to group"));
    }
    let indices: Vec<usize> = ex.phrases.iter().map(|p| p.index).collect();
    let vectors = weighted_semantic_vectors(&ex.table, &ex.scores, &ex.weights)?;
    let problem = GroupingProblem::new(vectors, ex.bank.rows_of(&indices))?;
    let assignment = greedy_relocate(&problem, args.max_sweeps)?;
    let k_groups = problem.groups();

    let mut maps = (0..k_groups)
        .map(|k| group_saliency(&ex.stack, &ex.weights, &assignment.groups, k))
        .collect::<Result<Vec<_>>>()?;
    if args.inject_partition_fault {
        maps[0].values[0] += 1.0;
    }
    let full = saliency(&ex.stack, &ex.weights)?;
    check_partition(&maps.iter().collect::<Vec<_>>(), &full.values)?;

    let out = &args.explain.out;
    let cmap = colormap(args.explain.colormap);
    let mut files = Vec::with_capacity(k_groups);
    for (k, map) in maps.iter().enumerate() {
        let name = format!("group_{}_{}.png", k + 1, slug(&ex.phrases[k].phrase));
        render(map, args.explain.render_height, args.explain.render_width, cmap)?.write_png(out.join(&name))?;
        files.push(name);
    }
    write_json(
        &out.join("groups.json"),
        &GroupsReport {
            config: &ex.config,
            groups: assignment.members(k_groups),
            phrases: ex.phrases.iter().map(|p| p.phrase.as_str()).collect(),
            objective: assignment.objective,
            sweeps: assignment.sweeps,
            moves: assignment.moves,
            converged: assignment.converged,
            files,
        },
    )?;
    for (k, members) in assignment.members(k_groups).iter().enumerate() {
        println!("{}\t{} channels\t{}", k + 1, members.len(), ex.phrases[k].phrase);
    }
    Ok(())
}

/// Checks that group maps add up to the full map.
fn check_partition(maps: &[&crate::cam::SaliencyMap], full: &[f64]) -> Result<()> {
    let scale = full.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for (i, &v) in full.iter().enumerate() {
        let sum: f64 = maps.iter().map(|m| m.values[i]).sum();
        if (sum - v).abs() > PARTITION_RTOL * scale {
            return Err(Error::invariant(format!(
                "group maps do not add up to the full map at pixel {i}: {sum} vs {v}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Serialize)]
struct EvalConfig {
    topk: usize,
    ablate_topk: Option<usize>,
    probe: String,
    ablate_head: String,
    m_extremes: Option<String>,
    shrinkage: Option<String>,
    images: usize,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    config: EvalConfig,
    heads: Vec<HeadReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ablation: Option<AblationReport>,
}

/// Parses the labels table: header of head names, then one row per image.
pub fn parse_labels(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r')).filter(|l| !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::invariant("labels file is empty"))?
        .split('\t')
        .map(str::to_string)
        .collect();
    let mut columns: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != header.len() {
            return Err(Error::shape(format!(
                "labels row {} has {} fields, header has {}",
                row + 1,
                cells.len(),
                header.len()
            )));
        }
        for (col, cell) in columns.iter_mut().zip(cells) {
            col.push(cell.to_string());
        }
    }
    Ok(header.into_iter().zip(columns).collect())
}

fn load_heads(bundle: &TensorBundle, probe: &str) -> Result<Vec<LinearHead>> {
    bundle
        .with_role(Role::HeadWeights)
        .filter(|(name, _)| *name != probe)
        .map(|(name, t)| {
            let key = format!("classes.{name}");
            let classes = bundle
                .metadata
                .get(&key)
                .ok_or_else(|| Error::invariant(format!("bundle metadata lacks `{key}`")))?
                .split(',')
                .map(|c| c.trim().to_string())
                .collect();
            LinearHead::new(name, t.to_matrix()?, classes)
        })
        .collect()
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let bundle = read_bundle(&args.features)?;
    let (_, feats) = bundle.find_role(Role::FeatureVector, Some("features"))?;
    let features = feats.to_matrix()?;
    let heads = load_heads(&bundle, &args.probe)?;
    if heads.is_empty() {
        return Err(Error::MissingTensor {
            role: Role::HeadWeights.to_string(),
            name: None,
        });
    }

    let table_bundle = read_bundle(&args.table)?;
    let table = ChannelSemanticsTable::from_bundle(&table_bundle)?;
    let concept_bundle = read_bundle(&args.concepts)?;
    let vocab = VocabularyBank::load(&concept_bundle, None, &args.concept_names)?;
    let bank = ConceptBank::new(vocab.phrases().to_vec(), vocab.embeddings().transpose())?;

    if !args.labels.is_file() {
        return Err(Error::MissingFile(args.labels.clone()));
    }
    let text = fs::read_to_string(&args.labels).map_err(|e| Error::io(&args.labels, e))?;
    let labels = parse_labels(&text)?;
    let column = |head: &str| {
        labels
            .get(head)
            .ok_or_else(|| Error::invariant(format!("labels file has no column for head `{head}`")))
    };

    let mut reports = Vec::with_capacity(heads.len());
    for head in &heads {
        reports.push(explain_head(head, &features, column(&head.name)?, &table, &bank, args.topk)?);
    }

    let ablation = match args.ablate_topk {
        None => None,
        Some(k) => {
            let probe = bundle.require(&args.probe, Role::HeadWeights)?.to_matrix()?;
            let head = heads
                .iter()
                .find(|h| h.name == args.ablate_head)
                .ok_or_else(|| Error::MissingTensor {
                    role: Role::HeadWeights.to_string(),
                    name: Some(args.ablate_head.clone()),
                })?;
            Some(ablation_report(head, &probe, k, &features, column(&head.name)?)?)
        }
    };

    for r in &reports {
        println!("{}\tAcc_TXT = {:.4}", r.head, r.acc_txt);
    }
    if let Some(a) = &ablation {
        println!(
            "ablation\t|S| = {} ({:.2}%)\t{} accuracy {:.4} -> {:.4}",
            a.mask_size,
            100.0 * a.mask_fraction,
            a.head,
            a.accuracy_before,
            a.accuracy_after
        );
    }

    ensure_dir(&args.out)?;
    let report = EvalReport {
        config: EvalConfig {
            topk: args.topk,
            ablate_topk: args.ablate_topk,
            probe: args.probe.clone(),
            ablate_head: args.ablate_head.clone(),
            m_extremes: table_bundle.metadata.get("m_extremes").cloned(),
            shrinkage: table_bundle.metadata.get("shrinkage").cloned(),
            images: features.nrows(),
            seed: args.seed,
        },
        heads: reports,
        ablation,
    };
    write_json(&args.out.join("eval.json"), &report)
}

// ---------------------------------------------------------------- synth-clevr

/// Ridge weight for the synthetic heads and probe.
pub const SYNTH_RIDGE: f64 = 1.0;
/// Seed offset of the color-balanced test split.
pub const TEST_SEED_OFFSET: u64 = 1000;

fn names(items: &[&str]) -> String {
    items.join(",")
}

fn features_bundle(
    data: &SynthData,
    shape: &DMatrix<f64>,
    color: &DMatrix<f64>,
    probe: &DMatrix<f64>,
    bias: f64,
    seed: u64,
) -> Result<TensorBundle> {
    let mut b = TensorBundle::new()
        .with_metadata("classes.shape", names(&synth::SHAPES))
        .with_metadata("classes.color", names(&synth::COLORS))
        .with_metadata("bias", bias.to_string())
        .with_metadata("seed", seed.to_string());
    b.insert("features", Role::FeatureVector, Tensor::from_matrix(&data.features))?;
    b.insert("shape", Role::HeadWeights, Tensor::from_matrix(shape))?;
    b.insert("color", Role::HeadWeights, Tensor::from_matrix(color))?;
    b.insert("color_probe", Role::HeadWeights, Tensor::from_matrix(probe))?;
    Ok(b)
}

fn labels_tsv(data: &SynthData) -> String {
    let mut s = String::from("shape\tcolor\n");
    for (sh, co) in data.shapes.iter().zip(&data.colors) {
        s.push_str(synth::SHAPES[*sh]);
        s.push('\t');
        s.push_str(synth::COLORS[*co]);
        s.push('\n');
    }
    s
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.n_per_class == 0 || args.grid == 0 {
        return Err(Error::invariant("n-per-class and grid must be positive"));
    }
    let train = synth::synth_clevr_features(args.seed, args.n_per_class, args.bias)?;
    let test_seed = args.seed.wrapping_add(TEST_SEED_OFFSET);
    let test = synth::synth_clevr_features(test_seed, args.n_per_class, args.test_bias)?;

    let shape = synth::fit_linear_head(&train.features, &train.shapes, 3, SYNTH_RIDGE)?;
    let color = synth::fit_linear_head(&train.features, &train.colors, 3, SYNTH_RIDGE)?;
    // The probe is a separate fit so it stays distinct from the color head
    // if either fit changes.
    let probe = synth::fit_linear_head(&train.features, &train.colors, 3, SYNTH_RIDGE)?;

    let out = &args.out;
    ensure_dir(out)?;

    let mut reference = TensorBundle::new()
        .with_metadata("seed", args.seed.to_string())
        .with_metadata("bias", args.bias.to_string());
    reference.insert("scores", Role::Activation, Tensor::from_matrix(&train.features))?;
    reference.insert("image_embeddings", Role::ClipImageEmbedding, Tensor::from_matrix(&train.image_embeddings))?;
    write_bundle(&reference, out.join("reference"))?;

    let mut concepts = TensorBundle::new();
    let concept_matrix = synth::concept_embeddings(&train.params).transpose();
    concepts.insert("concept_embeddings", Role::ClipTextEmbedding, Tensor::from_matrix(&concept_matrix))?;
    write_bundle(&concepts, out.join("concepts"))?;
    write_atomic(&out.join("concepts.txt"), (synth::CONCEPTS.join("\n") + "\n").as_bytes())?;

    write_bundle(
        &features_bundle(&train, &shape, &color, &probe, args.bias, args.seed)?,
        out.join("train_features"),
    )?;
    write_atomic(&out.join("train_labels.tsv"), labels_tsv(&train).as_bytes())?;
    write_bundle(
        &features_bundle(&test, &shape, &color, &probe, args.test_bias, test_seed)?,
        out.join("test_features"),
    )?;
    write_atomic(&out.join("test_labels.tsv"), labels_tsv(&test).as_bytes())?;

    // One test image, explained once per head for its true attribute.
    let stack = test.activation_stack(0, args.grid, args.grid)?;
    for (dir, head, class) in [
        ("image_shape", &shape, test.shapes[0]),
        ("image_color", &color, test.colors[0]),
    ] {
        let mut b = TensorBundle::new()
            .with_metadata("class_index", class.to_string())
            .with_metadata("shape", synth::SHAPES[test.shapes[0]])
            .with_metadata("color", synth::COLORS[test.colors[0]]);
        b.insert("activations", Role::Activation, stack.to_tensor())?;
        b.insert("head", Role::HeadWeights, Tensor::from_matrix(head))?;
        write_bundle(&b, out.join(dir))?;
    }
    println!(
        "wrote {} train / {} test images ({} channels) to {}",
        train.len(),
        test.len(),
        train.features.ncols(),
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("Long-necked Bird!"), "long-necked-bird");
        assert_eq!(slug("  red  "), "red");
        assert_eq!(slug("☃"), "phrase");
    }

    #[test]
    fn labels_table() {
        let t = parse_labels("shape\tcolor\ncube\tblue\nball\tred\n").unwrap();
        assert_eq!(t["shape"], vec!["cube", "ball"]);
        assert_eq!(t["color"], vec!["blue", "red"]);
        assert!(parse_labels("shape\tcolor\ncube\n").is_err());
        assert!(parse_labels("").is_err());
    }

    #[test]
    fn pooled_reference_scores() {
        let t = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, 4.0, 6.0]).unwrap();
        let m = reference_scores(&t).unwrap();
        assert_eq!(m.as_slice(), &[2.0, 5.0]);
    }
}
