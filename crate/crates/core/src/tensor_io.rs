//! Tensor bundles: a directory holding `manifest.json` plus one raw
//! little-endian `f32` blob per tensor (`<name>.bin`, row-major).
//!
//! Writing is deterministic: entries are emitted in lexicographic name
//! order, the manifest is pretty-printed JSON with sorted metadata keys, and
//! blobs are the exact little-endian bytes of the data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Activation,
    Gradient,
    ClipImageEmbedding,
    ClipTextEmbedding,
    HeadWeights,
    ChannelWeights,
    FeatureVector,
    Labels,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Activation => "activation",
            Role::Gradient => "gradient",
            Role::ClipImageEmbedding => "clip_image_embedding",
            Role::ClipTextEmbedding => "clip_text_embedding",
            Role::HeadWeights => "head_weights",
            Role::ChannelWeights => "channel_weights",
            Role::FeatureVector => "feature_vector",
            Role::Labels => "labels",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "shape {shape:?} must be a nonempty list of positive dimensions"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(m.row(r).iter().map(|&v| v as f32));
        }
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Interprets a rank-2 tensor as a matrix (rows = first dimension).
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape.as_slice() {
            &[rows, cols] => Ok(DMatrix::from_row_iterator(
                rows,
                cols,
                self.data.iter().map(|&v| f64::from(v)),
            )),
            other => Err(Error::shape(format!("expected a rank-2 tensor, got shape {other:?}"))),
        }
    }

    /// Interprets a rank-1 tensor (or a `[1, n]` / `[n, 1]` one) as a vector.
    pub fn to_vector(&self) -> Result<DVector<f64>> {
        match self.shape.as_slice() {
            &[_] | &[1, _] | &[_, 1] => Ok(DVector::from_iterator(
                self.data.len(),
                self.data.iter().map(|&v| f64::from(v)),
            )),
            other => Err(Error::shape(format!("expected a vector, got shape {other:?}"))),
        }
    }

    fn first_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_nonfinite: bool,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleTensor {
    pub role: Role,
    pub tensor: Tensor,
}

/// An in-memory bundle. Tensors are keyed by name; iteration order is
/// lexicographic, which is also the on-disk entry order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorBundle {
    pub metadata: BTreeMap<String, String>,
    pub allow_nonfinite: bool,
    tensors: BTreeMap<String, RoleTensor>,
}

fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invariant(format!(
            "tensor name {name:?} must be nonempty ASCII [A-Za-z0-9_.-] not starting with '.'"
        )))
    }
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a tensor.
    pub fn insert(&mut self, name: impl Into<String>, role: Role, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        self.tensors.insert(name, RoleTensor { role, tensor });
        Ok(())
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RoleTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&RoleTensor> {
        self.tensors.get(name)
    }

    /// Looks up a tensor by name and checks its role.
    pub fn require(&self, name: &str, role: Role) -> Result<&Tensor> {
        match self.tensors.get(name) {
            Some(rt) if rt.role == role => Ok(&rt.tensor),
            Some(rt) => Err(Error::invariant(format!(
                "tensor `{name}` has role `{}`, expected `{role}`",
                rt.role
            ))),
            None => Err(Error::MissingTensor {
                role: role.to_string(),
                name: Some(name.to_string()),
            }),
        }
    }

    /// All tensors with the given role, in name order.
    pub fn with_role(&self, role: Role) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors
            .iter()
            .filter(move |(_, rt)| rt.role == role)
            .map(|(k, rt)| (k.as_str(), &rt.tensor))
    }

    /// The single tensor with `role`, or the one named `preferred` when
    /// several share the role.
    pub fn find_role<'a>(&'a self, role: Role, preferred: Option<&str>) -> Result<(&'a str, &'a Tensor)> {
        if let Some(name) = preferred {
            if let Some((key, rt)) = self.tensors.get_key_value(name) {
                if rt.role == role {
                    return Ok((key.as_str(), &rt.tensor));
                }
            }
        }
        let mut found = self.with_role(role);
        match (found.next(), found.next()) {
            (Some(first), None) => Ok(first),
            (None, _) => Err(Error::MissingTensor {
                role: role.to_string(),
                name: preferred.map(str::to_string),
            }),
            (Some(_), Some(_)) => Err(Error::invariant(format!(
                "several tensors have role `{role}`; name the one to use{}",
                preferred.map(|p| format!(" (`{p}` not found)")).unwrap_or_default()
            ))),
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            allow_nonfinite: self.allow_nonfinite,
            entries: self
                .tensors
                .iter()
                .map(|(name, rt)| ManifestEntry {
                    name: name.clone(),
                    shape: rt.tensor.shape.clone(),
                    dtype: "f32".to_string(),
                    role: rt.role,
                })
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, rt) in &self.tensors {
            validate_name(name)?;
            let expected: usize = rt.tensor.shape.iter().product();
            if rt.tensor.shape.is_empty() || expected != rt.tensor.data.len() {
                return Err(Error::invariant(format!(
                    "tensor `{name}` has {} values for shape {:?}",
                    rt.tensor.data.len(),
                    rt.tensor.shape
                )));
            }
            if !self.allow_nonfinite {
                if let Some(index) = rt.tensor.first_nonfinite() {
                    return Err(Error::NonFiniteValue {
                        name: name.clone(),
                        index,
                    });
                }
            }
        }
        Ok(())
    }
}

fn manifest_bytes(manifest: &Manifest) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

fn blob_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(tensor.data.len() * 4);
    for v in &tensor.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Reads and validates a bundle directory.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<TensorBundle> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ManifestParse(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::ManifestParse(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }

    let mut bundle = TensorBundle {
        metadata: manifest.metadata,
        allow_nonfinite: manifest.allow_nonfinite,
        tensors: BTreeMap::new(),
    };
    for entry in manifest.entries {
        validate_name(&entry.name).map_err(|e| Error::ManifestParse(e.to_string()))?;
        if entry.dtype != "f32" {
            return Err(Error::ManifestParse(format!(
                "tensor `{}` has dtype {:?}; only \"f32\" is supported",
                entry.name, entry.dtype
            )));
        }
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(Error::ManifestParse(format!(
                "tensor `{}` has invalid shape {:?}",
                entry.name, entry.shape
            )));
        }
        if bundle.tensors.contains_key(&entry.name) {
            return Err(Error::ManifestParse(format!("duplicate tensor name `{}`", entry.name)));
        }
        let blob_path = dir.join(format!("{}.bin", entry.name));
        if !blob_path.is_file() {
            return Err(Error::MissingFile(blob_path));
        }
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let count: usize = entry.shape.iter().product();
        if bytes.len() != count * 4 {
            return Err(Error::shape(format!(
                "blob for `{}` has {} bytes, shape {:?} needs {}",
                entry.name,
                bytes.len(),
                entry.shape,
                count * 4
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor {
            shape: entry.shape,
            data,
        };
        if !bundle.allow_nonfinite {
            if let Some(index) = tensor.first_nonfinite() {
                return Err(Error::NonFiniteValue {
                    name: entry.name,
                    index,
                });
            }
        }
        bundle.tensors.insert(entry.name, RoleTensor { role: entry.role, tensor });
    }
    Ok(bundle)
}

/// Writes `bundle` to the directory `path`.
///
/// The bundle is assembled in a sibling temporary directory and renamed into
/// place. An existing target is replaced only if it is a bundle directory
/// (contains `manifest.json`) or empty.
pub fn write_bundle(bundle: &TensorBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let target = path.as_ref();
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let file_name = target
        .file_name()
        .ok_or_else(|| Error::invariant(format!("invalid bundle path {}", target.display())))?;
    let staging = parent.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;

    let result = (|| {
        for (name, rt) in &bundle.tensors {
            let p = staging.join(format!("{name}.bin"));
            fs::write(&p, blob_bytes(&rt.tensor)).map_err(|e| Error::io(&p, e))?;
        }
        let p = staging.join(MANIFEST_FILE);
        fs::write(&p, manifest_bytes(&bundle.manifest())).map_err(|e| Error::io(&p, e))?;

        if target.exists() {
            let replaceable = target.join(MANIFEST_FILE).is_file()
                || fs::read_dir(target)
                    .map(|mut d| d.next().is_none())
                    .unwrap_or(false);
            if !replaceable {
                return Err(Error::invariant(format!(
                    "refusing to overwrite {}: not a bundle directory",
                    target.display()
                )));
            }
            fs::remove_dir_all(target).map_err(|e| Error::io(target, e))?;
        }
        fs::rename(&staging, target).map_err(|e| Error::io(target, e))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TensorBundle {
        let mut b = TensorBundle::new();
        b.insert("a", Role::Activation, Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        b
    }

    #[test]
    fn smallest_bundle_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b");
        write_bundle(&tiny(), &path).unwrap();
        assert_eq!(fs::metadata(path.join("a.bin")).unwrap().len(), 16);
        let back = read_bundle(&path).unwrap();
        let t = back.require("a", Role::Activation).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn short_blob_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b");
        write_bundle(&tiny(), &path).unwrap();
        fs::write(path.join("a.bin"), [0u8; 12]).unwrap();
        assert!(matches!(read_bundle(&path), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn missing_directory_is_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_bundle(dir.path().join("nope")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn bad_manifest_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::ManifestParse(_))));

        let m = r#"{"format_version": 2, "entries": [], "metadata": {}}"#;
        fs::write(dir.path().join(MANIFEST_FILE), m).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::ManifestParse(_))));

        let m = r#"{"format_version": 1, "entries": [{"name":"a","shape":[1],"dtype":"f64","role":"labels"}], "metadata": {}}"#;
        fs::write(dir.path().join(MANIFEST_FILE), m).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::ManifestParse(_))));

        let m = r#"{"format_version": 1, "entries": [{"name":"a","shape":[1],"dtype":"f32","role":"weights"}], "metadata": {}}"#;
        fs::write(dir.path().join(MANIFEST_FILE), m).unwrap();
        assert!(matches!(read_bundle(dir.path()), Err(Error::ManifestParse(_))));
    }

    #[test]
    fn nonfinite_rejected_unless_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b");
        let mut b = TensorBundle::new();
        b.insert("x", Role::FeatureVector, Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap())
            .unwrap();
        assert!(matches!(write_bundle(&b, &path), Err(Error::NonFiniteValue { index: 1, .. })));

        b.allow_nonfinite = true;
        write_bundle(&b, &path).unwrap();
        let back = read_bundle(&path).unwrap();
        assert!(back.get("x").unwrap().tensor.data()[1].is_nan());

        // Same blob without the flag fails on read.
        let m = fs::read_to_string(path.join(MANIFEST_FILE)).unwrap();
        fs::write(path.join(MANIFEST_FILE), m.replace("\"allow_nonfinite\": true,", "")).unwrap();
        assert!(matches!(read_bundle(&path), Err(Error::NonFiniteValue { .. })));
    }

    #[test]
    fn empty_bundle_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty");
        write_bundle(&TensorBundle::new(), &path).unwrap();
        let back = read_bundle(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn entries_sorted_by_name() {
        let mut b = TensorBundle::new();
        b.insert("b", Role::Labels, Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        b.insert("a", Role::Labels, Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let names: Vec<_> = b.manifest().entries.into_iter().map(|e| e.name).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn names_are_checked() {
        let mut b = TensorBundle::new();
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(b.insert("", Role::Labels, t.clone()).is_err());
        assert!(b.insert("../x", Role::Labels, t.clone()).is_err());
        assert!(b.insert("héllo", Role::Labels, t.clone()).is_err());
        assert!(b.insert("ok_name-1.v2", Role::Labels, t).is_ok());
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn refuses_to_clobber_non_bundle_dir() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("keep");
        fs::create_dir(&target).unwrap();
        fs::write(target.join("precious.txt"), "x").unwrap();
        assert!(write_bundle(&tiny(), &target).is_err());
        assert!(target.join("precious.txt").exists());
    }

    #[test]
    fn matrix_conversion_is_row_major() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let m = t.to_matrix().unwrap();
        assert_eq!(m[(0, 2)], 3.0);
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(Tensor::from_matrix(&m), t);
    }
}
