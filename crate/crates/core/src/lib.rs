//! Natural-language explanations for class activation maps.
//!
//! The pipeline works on precomputed tensors:
//!
//! 1. [`cam`] turns a layer's activations and a class's channel weights into
//!    a saliency map and pooled channel scores.
//! 2. [`semantics`] gives every channel a unit direction in the image
//!    embedding space (two-class LDA between its highest- and
//!    lowest-responding reference images) and sums them into one vector per
//!    explained image.
//! 3. [`sparse`] explains that vector with a few vocabulary phrases by
//!    solving a nonnegative, correlation-penalized sparse approximation with
//!    ADMM.
//! 4. [`grouping`] splits the channels among the selected phrases and
//!    renders one partial saliency map per phrase.
//!
//! [`concept`], [`protocol`] and [`synth`] implement the concept-accuracy and
//! color-ablation evaluation, and [`tensor_io`] the on-disk bundle format.

pub mod cam;
pub mod cli;
pub mod concept;
pub mod error;
pub mod grouping;
pub mod protocol;
pub mod semantics;
pub mod sparse;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};

use std::fs;
use std::path::{Path, PathBuf};

/// Writes `bytes` to a temporary sibling file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
