//! Per-channel semantic directions in the image-embedding space.
//!
//! For each channel the reference images with the `M` highest and `M` lowest
//! activation scores form a positive and a negative class; the two-class
//! Fisher direction separating their embeddings becomes the channel's
//! direction `p_j`. An image is then summarised as `T = sum_j w_j a_j p_j`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cam::ChannelWeights;
use crate::error::{Error, Result};
use crate::tensor_io::{Role, Tensor, TensorBundle};

/// Mean differences shorter than this mark a channel as degenerate.
pub const DEGENERATE_MEAN_GAP: f64 = 1e-9;

pub const DIRECTIONS_TENSOR: &str = "channel_directions";
pub const DEGENERATE_TENSOR: &str = "degenerate";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelSemanticsConfig {
    /// Images taken from each end of a channel's score ranking.
    pub m_extremes: usize,
    /// Relative ridge: `shrinkage * trace(S_W) / D` is added to the
    /// within-class scatter diagonal.
    pub shrinkage: f64,
}

impl Default for ChannelSemanticsConfig {
    fn default() -> Self {
        ChannelSemanticsConfig {
            m_extremes: 100,
            shrinkage: 1e-3,
        }
    }
}

impl ChannelSemanticsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_extremes < 2 {
            return Err(Error::invariant(format!(
                "m_extremes must be at least 2, got {}",
                self.m_extremes
            )));
        }
        if !(self.shrinkage >= 0.0 && self.shrinkage.is_finite()) {
            return Err(Error::invariant(format!(
                "shrinkage must be finite and nonnegative, got {}",
                self.shrinkage
            )));
        }
        Ok(())
    }
}

/// Reference pool: one image embedding and one score per channel for every
/// image. Embedding rows are rescaled to unit norm on construction.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    embeddings: DMatrix<f64>,
    scores: DMatrix<f64>,
}

impl ReferenceSet {
    /// `embeddings` is `[n, D]`, `scores` is `[n, d]`.
    pub fn new(mut embeddings: DMatrix<f64>, scores: DMatrix<f64>) -> Result<Self> {
        if embeddings.nrows() != scores.nrows() {
            return Err(Error::shape(format!(
                "{} embeddings but {} score rows",
                embeddings.nrows(),
                scores.nrows()
            )));
        }
        if embeddings.iter().chain(scores.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                name: "reference set".into(),
                index: 0,
            });
        }
        for (i, mut row) in embeddings.row_iter_mut().enumerate() {
            let norm = row.norm();
            if norm == 0.0 {
                return Err(Error::invariant(format!("reference embedding {i} is zero")));
            }
            row /= norm;
        }
        Ok(ReferenceSet { embeddings, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.scores.ncols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    fn rows(&self, indices: &[usize]) -> DMatrix<f64> {
        self.embeddings.select_rows(indices)
    }
}

/// Indices of the `m` highest scores and of the `m` lowest among the rest.
///
/// Ties are broken by ascending index. The negative set never overlaps the
/// positive set, so with all-equal scores the positives are the first `m`
/// indices and the negatives the next `m`.
pub fn select_extremes(scores: &[f64], m: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = scores.len();
    if n < 2 * m {
        return Err(Error::TooFewSamples {
            needed: 2 * m,
            got: n,
        });
    }
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let pos: Vec<usize> = desc[..m].to_vec();

    let mut taken = vec![false; n];
    for &i in &pos {
        taken[i] = true;
    }
    let mut asc: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    asc.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    asc.truncate(m);
    Ok((pos, asc))
}

fn column_mean(rows: &DMatrix<f64>) -> DVector<f64> {
    let n = rows.nrows() as f64;
    DVector::from_iterator(rows.ncols(), rows.column_iter().map(|c| c.sum() / n))
}

fn add_scatter(scatter: &mut DMatrix<f64>, rows: &DMatrix<f64>, mean: &DVector<f64>) {
    for row in rows.row_iter() {
        let centred = row.transpose() - mean;
        scatter.ger(1.0, &centred, &centred, 1.0);
    }
}

/// Two-class Fisher direction `(S_W + lambda I)^{-1} (mu_pos - mu_neg)`,
/// unit length and oriented so positives project higher than negatives.
///
/// `shrinkage` is relative: `lambda = shrinkage * trace(S_W) / D`. Returns
/// `Ok(None)` when the class means coincide.
pub fn lda_direction(
    pos: &DMatrix<f64>,
    neg: &DMatrix<f64>,
    shrinkage: f64,
) -> Result<Option<DVector<f64>>> {
    if pos.nrows() < 2 || neg.nrows() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: pos.nrows().min(neg.nrows()),
        });
    }
    if pos.ncols() != neg.ncols() {
        return Err(Error::shape(format!(
            "positive embeddings have dim {}, negative {}",
            pos.ncols(),
            neg.ncols()
        )));
    }
    let dim = pos.ncols();
    let mu_pos = column_mean(pos);
    let mu_neg = column_mean(neg);
    let diff = &mu_pos - &mu_neg;
    if diff.norm() < DEGENERATE_MEAN_GAP {
        return Ok(None);
    }

    let mut scatter = DMatrix::<f64>::zeros(dim, dim);
    add_scatter(&mut scatter, pos, &mu_pos);
    add_scatter(&mut scatter, neg, &mu_neg);

    let trace = scatter.trace();
    let mut direction = if trace <= 0.0 {
        // No within-class spread at all: the mean difference is the direction.
        diff.clone()
    } else {
        let lambda = shrinkage * trace / dim as f64;
        for i in 0..dim {
            scatter[(i, i)] += lambda;
        }
        let chol = scatter.cholesky().ok_or(Error::SingularScatter)?;
        chol.solve(&diff)
    };

    let norm = direction.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::SingularScatter);
    }
    direction /= norm;
    if direction.dot(&diff) < 0.0 {
        direction = -direction;
    }
    Ok(Some(direction))
}

/// Unit directions `p_j` as rows of a `[d, D]` matrix; degenerate channels
/// hold zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSemanticsTable {
    pub directions: DMatrix<f64>,
    pub degenerate: Vec<bool>,
}

impl ChannelSemanticsTable {
    pub fn channels(&self) -> usize {
        self.directions.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.directions.ncols()
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }

    pub fn to_bundle(&self, cfg: &ChannelSemanticsConfig) -> TensorBundle {
        let mut b = TensorBundle::new()
            .with_metadata("kind", "channel_semantics_table")
            .with_metadata("m_extremes", cfg.m_extremes.to_string())
            .with_metadata("shrinkage", format!("{:e}", cfg.shrinkage));
        b.insert(DIRECTIONS_TENSOR, Role::ClipImageEmbedding, Tensor::from_matrix(&self.directions))
            .expect("valid name");
        let mask: Vec<f64> = self.degenerate.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
        b.insert(
            DEGENERATE_TENSOR,
            Role::Labels,
            Tensor::from_f64(vec![mask.len()], &mask).expect("nonempty mask"),
        )
        .expect("valid name");
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let directions = bundle
            .require(DIRECTIONS_TENSOR, Role::ClipImageEmbedding)?
            .to_matrix()?;
        let mask = bundle.require(DEGENERATE_TENSOR, Role::Labels)?;
        if mask.len() != directions.nrows() {
            return Err(Error::shape(format!(
                "degenerate mask has {} entries for {} channels",
                mask.len(),
                directions.nrows()
            )));
        }
        let degenerate: Vec<bool> = mask.data().iter().map(|&v| v != 0.0).collect();
        for (j, row) in directions.row_iter().enumerate() {
            let norm = row.norm();
            let ok = if degenerate[j] {
                norm == 0.0
            } else {
                (norm - 1.0).abs() <= 1e-4
            };
            if !ok {
                return Err(Error::invariant(format!(
                    "channel {j} direction has norm {norm} (degenerate: {})",
                    degenerate[j]
                )));
            }
        }
        Ok(ChannelSemanticsTable {
            directions,
            degenerate,
        })
    }
}

fn channel_direction(
    reference: &ReferenceSet,
    channel: usize,
    cfg: &ChannelSemanticsConfig,
) -> Result<Option<DVector<f64>>> {
    let scores: Vec<f64> = reference.scores.column(channel).iter().copied().collect();
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if lo == hi {
        // A channel that never varies carries no signal to separate.
        return Ok(None);
    }
    let (pos, neg) = select_extremes(&scores, cfg.m_extremes)?;
    lda_direction(&reference.rows(&pos), &reference.rows(&neg), cfg.shrinkage)
}

/// Runs extreme selection and LDA for every channel.
///
/// Channels are processed in parallel; each row depends only on its own
/// channel so the result is identical to a sequential run.
pub fn build_table(reference: &ReferenceSet, cfg: &ChannelSemanticsConfig) -> Result<ChannelSemanticsTable> {
    cfg.validate()?;
    if reference.len() < 2 * cfg.m_extremes {
        return Err(Error::TooFewSamples {
            needed: 2 * cfg.m_extremes,
            got: reference.len(),
        });
    }
    let rows: Vec<Option<DVector<f64>>> = (0..reference.channels())
        .into_par_iter()
        .map(|j| channel_direction(reference, j, cfg))
        .collect::<Result<_>>()?;

    let dim = reference.embedding_dim();
    let mut directions = DMatrix::<f64>::zeros(rows.len(), dim);
    let mut degenerate = vec![false; rows.len()];
    for (j, row) in rows.into_iter().enumerate() {
        match row {
            Some(p) => directions.set_row(j, &p.transpose()),
            None => degenerate[j] = true,
        }
    }
    Ok(ChannelSemanticsTable {
        directions,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticRepresentation {
    pub vector: DVector<f64>,
    pub class_index: usize,
}

fn check_lengths(table: &ChannelSemanticsTable, scores: &[f64], weights: &ChannelWeights) -> Result<()> {
    let d = table.channels();
    if scores.len() != d || weights.len() != d {
        return Err(Error::shape(format!(
            "table has {d} channels, got {} scores and {} weights",
            scores.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// Rows `w_j a_j p_j`, one per channel (`[d, D]`).
pub fn weighted_semantic_vectors(
    table: &ChannelSemanticsTable,
    scores: &[f64],
    weights: &ChannelWeights,
) -> Result<DMatrix<f64>> {
    check_lengths(table, scores, weights)?;
    let mut out = table.directions.clone();
    for (j, mut row) in out.row_iter_mut().enumerate() {
        row *= weights.values[j] * scores[j];
    }
    Ok(out)
}

/// `T = sum_j w_j a_j p_j`.
pub fn semantic_representation(
    table: &ChannelSemanticsTable,
    scores: &[f64],
    weights: &ChannelWeights,
) -> Result<SemanticRepresentation> {
    check_lengths(table, scores, weights)?;
    let mut t = DVector::<f64>::zeros(table.embedding_dim());
    for (j, row) in table.directions.row_iter().enumerate() {
        let coeff = weights.values[j] * scores[j];
        if coeff != 0.0 && !table.degenerate[j] {
            t.axpy(coeff, &row.transpose(), 1.0);
        }
    }
    Ok(SemanticRepresentation {
        vector: t,
        class_index: weights.class_index,
    })
}
