//! Evaluation pipelines built from the concept primitives: per-head textual
//! accuracy and the color-subspace ablation.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cam::{weights_from_head, ChannelWeights};
use crate::concept::{
    ablate_rows, argmax, color_dominant_mask, concept_scores, predict, top_k_indices, txt_accuracy, ConceptBank,
};
use crate::error::{Error, Result};
use crate::semantics::{semantic_representation, ChannelSemanticsTable};

/// A bias-free linear head with named classes.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub name: String,
    pub weights: DMatrix<f64>,
    pub classes: Vec<String>,
}

impl LinearHead {
    pub fn new(name: impl Into<String>, weights: DMatrix<f64>, classes: Vec<String>) -> Result<Self> {
        if classes.len() != weights.nrows() {
            return Err(Error::shape(format!(
                "head has {} rows but {} class names",
                weights.nrows(),
                classes.len()
            )));
        }
        Ok(LinearHead {
            name: name.into(),
            weights,
            classes,
        })
    }

    pub fn class_index(&self, class: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::invariant(format!("label {class:?} is not a class of head `{}`", self.name)))
    }

    pub fn channel_weights(&self, class: usize) -> Result<ChannelWeights> {
        weights_from_head(&self.weights, class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredConcept {
    pub concept: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageExplanation {
    pub index: usize,
    pub label: String,
    pub predicted_concept: String,
    pub top_concepts: Vec<ScoredConcept>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadReport {
    pub head: String,
    pub acc_txt: f64,
    pub images: Vec<ImageExplanation>,
}

/// Explains every image for the class given by its label and scores the
/// explanation against the concept bank.
///
/// Image `i` uses pooled features `features[i]` as channel scores and the
/// head row of its labelled class as channel weights.
pub fn explain_head(
    head: &LinearHead,
    features: &DMatrix<f64>,
    labels: &[String],
    table: &ChannelSemanticsTable,
    bank: &ConceptBank,
    top_k: usize,
) -> Result<HeadReport> {
    if labels.len() != features.nrows() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: features.nrows(),
        });
    }
    if features.ncols() != table.channels() || head.weights.ncols() != table.channels() {
        return Err(Error::shape(format!(
            "features have {} channels, head {}, table {}",
            features.ncols(),
            head.weights.ncols(),
            table.channels()
        )));
    }
    for label in labels {
        if bank.index_of(label).is_none() {
            return Err(Error::invariant(format!("label {label:?} is not in the concept bank")));
        }
    }

    let mut images = Vec::with_capacity(labels.len());
    let mut predicted = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let class = head.class_index(label)?;
        let weights = head.channel_weights(class)?;
        let scores: Vec<f64> = features.row(i).iter().copied().collect();
        let t = semantic_representation(table, &scores, &weights)?;
        let cos = concept_scores(&t.vector, bank)?;
        let best = argmax(&cos).expect("bank is nonempty");
        let top = top_k_indices(&cos, top_k)
            .into_iter()
            .map(|c| ScoredConcept {
                concept: bank.concepts()[c].clone(),
                score: cos[c],
            })
            .collect();
        predicted.push(bank.concepts()[best].clone());
        images.push(ImageExplanation {
            index: i,
            label: label.clone(),
            predicted_concept: bank.concepts()[best].clone(),
            top_concepts: top,
        });
    }
    Ok(HeadReport {
        head: head.name.clone(),
        acc_txt: txt_accuracy(&predicted, labels)?,
        images,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub head: String,
    pub topk: usize,
    pub mask_size: usize,
    pub mask_fraction: f64,
    pub mask: Vec<usize>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

/// Classification accuracy of `head` before and after zeroing the union of
/// the probe's per-class top-`k` feature coordinates.
pub fn ablation_report(
    head: &LinearHead,
    probe: &DMatrix<f64>,
    topk: usize,
    features: &DMatrix<f64>,
    labels: &[String],
) -> Result<AblationReport> {
    if probe.ncols() != features.ncols() {
        return Err(Error::shape(format!(
            "probe covers {} features, data has {}",
            probe.ncols(),
            features.ncols()
        )));
    }
    let truth: Vec<usize> = labels.iter().map(|l| head.class_index(l)).collect::<Result<_>>()?;
    let mask = color_dominant_mask(probe, topk)?;
    let before = txt_accuracy(&predict(&head.weights, features)?, &truth)?;
    let after = txt_accuracy(&predict(&head.weights, &ablate_rows(features, &mask)?)?, &truth)?;
    Ok(AblationReport {
        head: head.name.clone(),
        topk,
        mask_size: mask.len(),
        mask_fraction: mask.len() as f64 / features.ncols() as f64,
        mask: mask.into_iter().collect(),
        accuracy_before: before,
        accuracy_after: after,
    })
}

/// The semantic representation of one image for an explicit class.
pub fn image_representation(
    head: &LinearHead,
    class: usize,
    pooled: &DVector<f64>,
    table: &ChannelSemanticsTable,
) -> Result<DVector<f64>> {
    let weights = head.channel_weights(class)?;
    Ok(semantic_representation(table, pooled.as_slice(), &weights)?.vector)
}
