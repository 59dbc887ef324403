//! Sparse phrase selection.
//!
//! Solves
//!
//! ```text
//! min_{w >= 0}  1/2 ||T - E w||^2 + alpha ||w||_1 + beta w' G_off w
//! ```
//!
//! where `E` holds unit-norm phrase embeddings as columns and `G_off` is
//! `E'E` with its diagonal zeroed. On the feasible set `||w||_1 = 1'w`, so
//! the problem is a QP with Hessian `Q = E'E + 2 beta G_off` and linear term
//! `alpha 1 - E'T`, split as `w = z`, `z >= 0` for ADMM.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor_io::{Role, TensorBundle};

/// Entries at or below this count as zero when reporting phrases.
pub const POSITIVE_EPS: f64 = 1e-9;

const UNIT_NORM_TOL: f64 = 1e-4;
const POWER_ITERATIONS: usize = 64;
/// Iterates this far beyond the data scale mean the objective is unbounded
/// below on the feasible set.
const DIVERGENCE_FACTOR: f64 = 1e12;

/// Phrase list with index-aligned embedding columns (`[D, N]`).
#[derive(Debug, Clone)]
pub struct VocabularyBank {
    phrases: Vec<String>,
    embeddings: DMatrix<f64>,
}

impl VocabularyBank {
    pub fn new(phrases: Vec<String>, embeddings: DMatrix<f64>) -> Result<Self> {
        if phrases.is_empty() {
            return Err(Error::invariant("vocabulary is empty"));
        }
        if phrases.len() != embeddings.ncols() {
            return Err(Error::shape(format!(
                "{} phrases but {} embedding columns",
                phrases.len(),
                embeddings.ncols()
            )));
        }
        let mut seen = HashSet::new();
        for p in &phrases {
            if !seen.insert(p.as_str()) {
                return Err(Error::invariant(format!("duplicate phrase {p:?}")));
            }
        }
        for (i, col) in embeddings.column_iter().enumerate() {
            let norm = col.norm();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::invariant(format!(
                    "embedding of phrase {:?} has norm {norm}",
                    phrases[i]
                )));
            }
        }
        Ok(VocabularyBank { phrases, embeddings })
    }

    /// Loads `[D, N]` embeddings (role `clip_text_embedding`) from a bundle and
    /// phrases from a UTF-8 file with one phrase per line.
    pub fn load(bundle: &TensorBundle, tensor: Option<&str>, phrase_file: &Path) -> Result<Self> {
        let (_, t) = bundle.find_role(Role::ClipTextEmbedding, tensor)?;
        let embeddings = t.to_matrix()?;
        if !phrase_file.is_file() {
            return Err(Error::MissingFile(phrase_file.to_path_buf()));
        }
        let text = fs::read_to_string(phrase_file).map_err(|e| Error::io(phrase_file, e))?;
        Self::new(parse_phrase_lines(&text), embeddings)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    /// Embedding rows `[K, D]` of the given phrase indices.
    pub fn rows_of(&self, indices: &[usize]) -> DMatrix<f64> {
        self.embeddings.select_columns(indices).transpose()
    }
}

/// One phrase per line; a trailing newline (and `\r\n` endings) are accepted.
pub fn parse_phrase_lines(text: &str) -> Vec<String> {
    text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SparseSelectConfig {
    /// L1 weight; `None` means `0.1 * alpha_max` with `alpha_max = max(E'T)`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub top_k: usize,
}

impl Default for SparseSelectConfig {
    fn default() -> Self {
        SparseSelectConfig {
            alpha: None,
            beta: 0.1,
            rho: 1.0,
            tol: 1e-6,
            max_iter: 10_000,
            top_k: 5,
        }
    }
}

impl SparseSelectConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::invariant(format!("{what} out of range: {v}")));
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return bad("alpha", a);
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", self.beta);
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho", self.rho);
        }
        if !(self.tol > 0.0) {
            return bad("tol", self.tol);
        }
        if self.top_k == 0 {
            return Err(Error::invariant("top_k must be at least 1"));
        }
        Ok(())
    }

    pub fn resolve_alpha(&self, correlations: &DVector<f64>) -> f64 {
        self.alpha.unwrap_or_else(|| 0.1 * default_alpha_max(correlations))
    }
}

fn default_alpha_max(correlations: &DVector<f64>) -> f64 {
    correlations.max().max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSolution {
    pub weights: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the active-set refinement replaced the raw ADMM iterate.
    pub polished: bool,
    /// Support changes made by the local search after the splitting.
    pub support_moves: usize,
    pub alpha: f64,
    /// Penalty actually used (after the definiteness floor).
    pub rho: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// `E'E` with a zero diagonal.
pub fn gram_offdiag(embeddings: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = embeddings.transpose() * embeddings;
    g.fill_diagonal(0.0);
    g
}

/// The selection objective evaluated at `w` (any sign; `||w||_1` uses `|w|`).
pub fn objective(
    target: &DVector<f64>,
    embeddings: &DMatrix<f64>,
    weights: &DVector<f64>,
    alpha: f64,
    beta: f64,
) -> f64 {
    let residual = target - embeddings * weights;
    let g = gram_offdiag(embeddings);
    0.5 * residual.norm_squared() + alpha * weights.lp_norm(1) + beta * weights.dot(&(&g * weights))
}

/// Quadratic-form pieces shared by the solver and its checks.
struct Qp {
    hessian: DMatrix<f64>,
    /// `E'T - alpha 1`; the stationarity condition on a face is `Q w = rhs`.
    rhs: DVector<f64>,
    constant: f64,
}

impl Qp {
    fn new(target: &DVector<f64>, embeddings: &DMatrix<f64>, alpha: f64, beta: f64) -> Self {
        let gram = embeddings.transpose() * embeddings;
        let mut off = gram.clone();
        off.fill_diagonal(0.0);
        let hessian = gram + off * (2.0 * beta);
        let rhs = embeddings.transpose() * target - DVector::from_element(embeddings.ncols(), alpha);
        Qp {
            hessian,
            rhs,
            constant: 0.5 * target.norm_squared(),
        }
    }

    /// Exact objective for `w >= 0`.
    fn value(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.hessian * w)) - self.rhs.dot(w) + self.constant
    }
}

/// Gershgorin bound on the spectral radius of a symmetric matrix.
fn spectral_bound(q: &DMatrix<f64>) -> f64 {
    (0..q.nrows())
        .map(|i| q.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Estimate of the smallest eigenvalue of a symmetric matrix by power
/// iteration on `c I - Q`, where `c` bounds the spectrum from above.
fn estimate_min_eigenvalue(q: &DMatrix<f64>) -> f64 {
    let n = q.nrows();
    let upper = spectral_bound(q);
    let shifted = DMatrix::<f64>::identity(n, n) * upper - q;
    // Deterministic, generic start vector.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    v.normalize_mut();
    let mut top = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let next = &shifted * &v;
        let norm = next.norm();
        if norm == 0.0 {
            break;
        }
        top = v.dot(&next);
        v = next / norm;
    }
    upper - top
}

fn factor(hessian: &DMatrix<f64>, rho: f64) -> Option<Cholesky<f64, Dyn>> {
    let n = hessian.nrows();
    (hessian + DMatrix::<f64>::identity(n, n) * rho).cholesky()
}

/// Picks `rho >= requested` with `Q + rho I` positive definite and factors it.
///
/// When `Q` is indefinite the penalty is also raised to the spectral bound
/// of `Q`: below the curvature scale the iterates of a nonconvex splitting
/// can oscillate or run off to infinity.
fn floored_factorization(hessian: &DMatrix<f64>, requested: f64) -> Result<(f64, Cholesky<f64, Dyn>)> {
    let lambda_min = estimate_min_eigenvalue(hessian);
    let mut rho = requested.max(1.1 * (-lambda_min).max(0.0));
    if lambda_min < 0.0 {
        rho = rho.max(spectral_bound(hessian));
    }
    // The power estimate can fall short of the true minimum; grow until the
    // factorisation succeeds.
    for _ in 0..60 {
        if let Some(chol) = factor(hessian, rho) {
            return Ok((rho, chol));
        }
        rho = (rho * 2.0).max(requested);
    }
    Err(Error::IndefiniteSystem { rho })
}

/// Minimizer of the objective restricted to the face `{w_i > 0 for i in
/// support, w_i = 0 otherwise}`, if the face Hessian is positive definite
/// and the stationary point lies strictly inside the face.
fn face_solve(qp: &Qp, support: &[usize]) -> Option<DVector<f64>> {
    let mut out = DVector::<f64>::zeros(qp.rhs.len());
    if support.is_empty() {
        return Some(out);
    }
    let sub_q = qp.hessian.select_rows(support).select_columns(support);
    let sub_rhs = qp.rhs.select_rows(support);
    let sol = sub_q.cholesky()?.solve(&sub_rhs);
    for (k, &i) in support.iter().enumerate() {
        if !(sol[k] > 0.0) {
            return None;
        }
        out[i] = sol[k];
    }
    Some(out)
}

/// Re-solves the stationarity system on the support of `w` and keeps the
/// result if it is feasible, satisfies the sign conditions off the support
/// and does not increase the objective.
fn polish(qp: &Qp, w: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
    let candidate = face_solve(qp, &support)?;
    // Off the support the gradient of the smooth part plus alpha must be >= 0.
    let gradient = &qp.hessian * &candidate - &qp.rhs;
    let scale = 1.0 + qp.rhs.amax();
    if (0..w.len()).any(|i| candidate[i] == 0.0 && gradient[i] < -tol * scale) {
        return None;
    }
    (qp.value(&candidate) <= qp.value(w)).then_some(candidate)
}

/// Local search over supports: repeatedly moves to the best face minimizer
/// reachable by adding, dropping or swapping one index, while that lowers
/// the objective. Returns the final point and the number of moves.
///
/// With an indefinite Hessian the splitting only reaches a local minimum;
/// this escapes the shallow ones that differ from a better point by one
/// support change.
fn refine_support(qp: &Qp, w: DVector<f64>, max_moves: usize) -> (DVector<f64>, usize) {
    let n = w.len();
    let mut current = w;
    let mut value = qp.value(&current);
    let mut moves = 0;
    while moves < max_moves {
        let support: Vec<usize> = (0..n).filter(|&i| current[i] > 0.0).collect();
        let outside: Vec<usize> = (0..n).filter(|&i| current[i] <= 0.0).collect();
        let mut candidates: Vec<Vec<usize>> = Vec::new();
        for &j in &outside {
            let mut s = support.clone();
            s.push(j);
            s.sort_unstable();
            candidates.push(s);
        }
        for (k, _) in support.iter().enumerate() {
            let mut dropped = support.clone();
            dropped.remove(k);
            for &j in &outside {
                let mut s = dropped.clone();
                s.push(j);
                s.sort_unstable();
                candidates.push(s);
            }
            candidates.push(dropped);
        }
        let margin = 1e-12 * (1.0 + value.abs());
        let mut best: Option<(f64, DVector<f64>)> = None;
        for s in &candidates {
            if let Some(x) = face_solve(qp, s) {
                let v = qp.value(&x);
                if v < value - margin && best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                    best = Some((v, x));
                }
            }
        }
        match best {
            Some((v, x)) => {
                value = v;
                current = x;
                moves += 1;
            }
            None => break,
        }
    }
    (current, moves)
}

/// ADMM solve of the selection problem.
///
/// Starts from `w = z = u = 0` and stops when both the primal residual
/// `||w - z||` and the dual residual `rho ||z - z_prev||` are at most
/// `tol * sqrt(N)`. The returned weights are always the nonnegative `z`
/// iterate; on hitting `max_iter`, or when the iterates run off to infinity
/// because the objective is unbounded below, the best `z` seen is returned
/// with `converged = false`. The iterate is then polished on its support and
/// improved by a one-index support search; with an indefinite Hessian the
/// result is a local minimum, not necessarily the global one.
pub fn admm_solve(target: &DVector<f64>, bank: &VocabularyBank, cfg: &SparseSelectConfig) -> Result<SparseSolution> {
    cfg.validate()?;
    let e = bank.embeddings();
    if target.len() != e.nrows() {
        return Err(Error::shape(format!(
            "target has dim {}, vocabulary embeddings have dim {}",
            target.len(),
            e.nrows()
        )));
    }
    let correlations = e.transpose() * target;
    let alpha = cfg.resolve_alpha(&correlations);
    let qp = Qp::new(target, e, alpha, cfg.beta);
    let (rho, chol) = floored_factorization(&qp.hessian, cfg.rho)?;

    let run = run_admm(&qp, &chol, rho, cfg);
    let (weights, polished, support_moves) = finish(&qp, &run, cfg.tol);
    let objective = qp.value(&weights);
    Ok(SparseSolution {
        weights,
        objective,
        iterations: run.iterations,
        converged: run.converged,
        polished,
        support_moves,
        alpha,
        rho,
        primal_residual: run.primal,
        dual_residual: run.dual,
    })
}

struct AdmmRun {
    weights: DVector<f64>,
    iterations: usize,
    converged: bool,
    primal: f64,
    dual: f64,
}

/// ADMM iterations from `w = z = u = 0`.
fn run_admm(qp: &Qp, chol: &Cholesky<f64, Dyn>, rho: f64, cfg: &SparseSelectConfig) -> AdmmRun {
    let n = qp.rhs.len();
    let threshold = cfg.tol * (n as f64).sqrt();
    let mut z = DVector::<f64>::zeros(n);
    let mut u = DVector::<f64>::zeros(n);
    let mut best = (qp.value(&z), z.clone());
    let divergence = DIVERGENCE_FACTOR * (1.0 + qp.rhs.amax());
    let mut iterations = 0;
    let mut converged = false;
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);

    while iterations < cfg.max_iter {
        iterations += 1;
        let w = chol.solve(&(&qp.rhs + (&z - &u) * rho));
        let z_prev = std::mem::replace(&mut z, (&w + &u).map(|v| v.max(0.0)));
        u += &w - &z;

        primal = (&w - &z).norm();
        dual = rho * (&z - &z_prev).norm();
        if !(primal.is_finite() && dual.is_finite()) || z.amax() > divergence {
            break;
        }
        let value = qp.value(&z);
        if value.is_finite() && value < best.0 {
            best = (value, z.clone());
        }
        if primal <= threshold && dual <= threshold {
            converged = true;
            break;
        }
    }
    AdmmRun {
        weights: if converged { z } else { best.1 },
        iterations,
        converged,
        primal,
        dual,
    }
}

/// Polish and support search applied to a raw ADMM result.
fn finish(qp: &Qp, run: &AdmmRun, tol: f64) -> (DVector<f64>, bool, usize) {
    let mut weights = run.weights.clone();
    let mut polished = false;
    if let Some(p) = polish(qp, &weights, tol) {
        weights = p;
        polished = true;
    }
    let (weights, moves) = refine_support(qp, weights, qp.rhs.len());
    (weights, polished || moves > 0, moves)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectedPhrase {
    pub index: usize,
    pub phrase: String,
    pub weight: f64,
}

/// The `k` largest strictly positive weights, descending, ties by index.
pub fn top_k_phrases(weights: &DVector<f64>, bank: &VocabularyBank, k: usize) -> Vec<SelectedPhrase> {
    let mut positive: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > POSITIVE_EPS).collect();
    positive.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    positive
        .into_iter()
        .take(k)
        .map(|i| SelectedPhrase {
            index: i,
            phrase: bank.phrases[i].clone(),
            weight: weights[i],
        })
        .collect()
}
