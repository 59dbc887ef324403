//! Concept scoring, textual accuracy, and color-subspace ablation.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const UNIT_NORM_TOL: f64 = 1e-4;

/// Named concepts with unit-norm embedding rows (`[K, D]`).
#[derive(Debug, Clone)]
pub struct ConceptBank {
    concepts: Vec<String>,
    embeddings: DMatrix<f64>,
}

impl ConceptBank {
    pub fn new(concepts: Vec<String>, embeddings: DMatrix<f64>) -> Result<Self> {
        if concepts.len() != embeddings.nrows() {
            return Err(Error::shape(format!(
                "{} concepts but {} embedding rows",
                concepts.len(),
                embeddings.nrows()
            )));
        }
        if concepts.is_empty() {
            return Err(Error::invariant("concept bank is empty"));
        }
        for (i, row) in embeddings.row_iter().enumerate() {
            let norm = row.norm();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::invariant(format!(
                    "concept {:?} embedding has norm {norm}",
                    concepts[i]
                )));
            }
        }
        Ok(ConceptBank { concepts, embeddings })
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    pub fn index_of(&self, concept: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == concept)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}

/// Cosine similarity of `target` with every concept.
pub fn concept_scores(target: &DVector<f64>, bank: &ConceptBank) -> Result<Vec<f64>> {
    if target.len() != bank.embeddings.ncols() {
        return Err(Error::shape(format!(
            "target has dim {}, concepts have dim {}",
            target.len(),
            bank.embeddings.ncols()
        )));
    }
    let norm = target.norm();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let unit = target / norm;
    Ok(bank.embeddings.row_iter().map(|e| e.transpose().dot(&unit)).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Indices sorted by descending value, ties by index, truncated to `k`.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Fraction of predictions equal to their labels.
pub fn txt_accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptySet);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Union over probe rows of the `k` largest-magnitude feature indices
/// (ties by ascending index).
pub fn color_dominant_mask(probe: &DMatrix<f64>, k: usize) -> Result<BTreeSet<usize>> {
    let d = probe.ncols();
    if k == 0 || k > d {
        return Err(Error::invariant(format!("top-k must be in 1..={d}, got {k}")));
    }
    let mut mask = BTreeSet::new();
    for row in probe.row_iter() {
        let magnitudes: Vec<f64> = row.iter().map(|w| w.abs()).collect();
        mask.extend(top_k_indices(&magnitudes, k));
    }
    Ok(mask)
}

/// Copy of `features` with the coordinates in `mask` set to zero.
pub fn ablate(features: &DVector<f64>, mask: &BTreeSet<usize>) -> Result<DVector<f64>> {
    if let Some(&bad) = mask.range(features.len()..).next() {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: features.len(),
        });
    }
    let mut out = features.clone();
    for &j in mask {
        out[j] = 0.0;
    }
    Ok(out)
}

/// Predicted class of a bias-free linear head for each row of `features`.
pub fn predict(head: &DMatrix<f64>, features: &DMatrix<f64>) -> Result<Vec<usize>> {
    if head.ncols() != features.ncols() {
        return Err(Error::shape(format!(
            "head expects {} features, got {}",
            head.ncols(),
            features.ncols()
        )));
    }
    let logits = features * head.transpose();
    Ok(logits
        .row_iter()
        .map(|r| argmax(r.transpose().as_slice()).expect("head has classes"))
        .collect())
}

/// Applies [`ablate`] to every row.
pub fn ablate_rows(features: &DMatrix<f64>, mask: &BTreeSet<usize>) -> Result<DMatrix<f64>> {
    if let Some(&bad) = mask.range(features.ncols()..).next() {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: features.ncols(),
        });
    }
    let mut out = features.clone();
    for &j in mask {
        out.column_mut(j).fill(0.0);
    }
    Ok(out)
}
