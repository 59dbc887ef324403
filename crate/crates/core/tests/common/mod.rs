//! Reference implementations used to check the library from the outside.
//!
//! Each oracle takes a different route to the same answer: eigenproblems
//! instead of linear solves, exhaustive enumeration instead of iteration,
//! plain loops instead of vectorized code.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gauss_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gauss(rng))
}

pub fn gauss_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(rng))
}

pub fn unit_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = gauss_matrix(rng, rows, cols);
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    m
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

// ------------------------------------------------------------------ LDA

/// Within-class scatter: sum over both classes of centred outer products.
pub fn within_scatter(pos: &DMatrix<f64>, neg: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = pos.ncols();
    let mut sw = DMatrix::<f64>::zeros(dim, dim);
    for class in [pos, neg] {
        let mean = class.row_mean();
        for r in class.row_iter() {
            let c = (r - &mean).transpose();
            sw += &c * c.transpose();
        }
    }
    sw
}

/// Fisher direction as the top generalized eigenvector of `(S_B, S_W)`,
/// found by whitening with the Cholesky factor of `S_W`.
pub fn lda_eigen_oracle(pos: &DMatrix<f64>, neg: &DMatrix<f64>) -> DVector<f64> {
    let sw = within_scatter(pos, neg);
    let diff = (pos.row_mean() - neg.row_mean()).transpose();
    let sb = &diff * diff.transpose();
    let l = sw.cholesky().expect("scatter is positive definite").l();
    let l_inv = l.clone().try_inverse().expect("triangular factor is invertible");
    let m = &l_inv * sb * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(top).into_owned();
    let p = l_inv.transpose() * v;
    p.normalize()
}

/// Fisher ratio `p' S_B p / p' S_W p`.
pub fn fisher_ratio(p: &DVector<f64>, pos: &DMatrix<f64>, neg: &DMatrix<f64>) -> f64 {
    let sw = within_scatter(pos, neg);
    let diff = (pos.row_mean() - neg.row_mean()).transpose();
    p.dot(&diff).powi(2) / p.dot(&(&sw * p))
}

/// Two Gaussian clouds sharing a random covariance `L L'` with
/// `L = I + spread * G / sqrt(dim)`; rows are samples. Larger `spread`
/// gives worse-conditioned scatter.
pub fn two_gaussians(rng: &mut ChaCha8Rng, m: usize, dim: usize, spread: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mix = gauss_matrix(rng, dim, dim) * (spread / (dim as f64).sqrt()) + DMatrix::<f64>::identity(dim, dim);
    let shift = gauss_vector(rng, dim);
    let base = gauss_vector(rng, dim);
    let mut draw = |offset: &DVector<f64>| {
        let mut out = DMatrix::<f64>::zeros(m, dim);
        for i in 0..m {
            let x = &mix * gauss_vector(rng, dim) + offset;
            out.set_row(i, &x.transpose());
        }
        out
    };
    let pos = draw(&(&base + &shift));
    let neg = draw(&base);
    (pos, neg)
}

// ------------------------------------------------------------------ sparse selection

/// `0.5 ||T - E w||^2 + alpha sum|w| + beta sum_{i != j} w_i w_j <e_i, e_j>`
/// written with explicit loops.
pub fn selection_objective(t: &DVector<f64>, e: &DMatrix<f64>, w: &DVector<f64>, alpha: f64, beta: f64) -> f64 {
    let mut fit = 0.0;
    for r in 0..e.nrows() {
        let mut pred = 0.0;
        for c in 0..e.ncols() {
            pred += e[(r, c)] * w[c];
        }
        fit += (t[r] - pred).powi(2);
    }
    let mut l1 = 0.0;
    let mut div = 0.0;
    for i in 0..e.ncols() {
        l1 += w[i].abs();
        for j in 0..e.ncols() {
            if i != j {
                div += w[i] * w[j] * e.column(i).dot(&e.column(j));
            }
        }
    }
    0.5 * fit + alpha * l1 + beta * div
}

/// Global minimum over `w >= 0` by trying every support set: on support `S`
/// the stationarity condition is the linear system `Q_SS w_S = b_S`; only
/// nonnegative solutions are feasible candidates.
pub fn active_set_oracle(t: &DVector<f64>, e: &DMatrix<f64>, alpha: f64, beta: f64) -> (DVector<f64>, f64) {
    let n = e.ncols();
    let q = selection_hessian(e, beta);
    let b = e.transpose() * t - DVector::from_element(n, alpha);
    let mut best = DVector::zeros(n);
    let mut best_f = selection_objective(t, e, &best, alpha, beta);
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let k = support.len();
        let qs = DMatrix::from_fn(k, k, |a, c| q[(support[a], support[c])]);
        let bs = DVector::from_fn(k, |a, _| b[support[a]]);
        let Some(ws) = qs.lu().solve(&bs) else { continue };
        if ws.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            continue;
        }
        let mut w = DVector::zeros(n);
        for (a, &i) in support.iter().enumerate() {
            w[i] = ws[a];
        }
        let f = selection_objective(t, e, &w, alpha, beta);
        if f < best_f {
            best_f = f;
            best = w;
        }
    }
    (best, best_f)
}

/// Hessian of the selection objective on `w >= 0`.
pub fn selection_hessian(e: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let gram = e.transpose() * e;
    let mut q = gram.clone() * (1.0 + 2.0 * beta);
    for i in 0..gram.nrows() {
        q[(i, i)] = gram[(i, i)];
    }
    q
}

/// Minimum of `w' Q w` over the probability simplex, by enumerating the
/// stationary points of every face. Negative means `Q` is not copositive,
/// so a quadratic with Hessian `Q` is unbounded below on `w >= 0`.
pub fn simplex_min_quadratic(q: &DMatrix<f64>) -> f64 {
    let n = q.nrows();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) {
        let s: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let k = s.len();
        let mut a = DMatrix::zeros(k + 1, k + 1);
        for i in 0..k {
            for j in 0..k {
                a[(i, j)] = q[(s[i], s[j])];
            }
            a[(i, k)] = 1.0;
            a[(k, i)] = 1.0;
        }
        let mut b = DVector::zeros(k + 1);
        b[k] = 1.0;
        let Some(x) = a.lu().solve(&b) else { continue };
        if (0..k).all(|i| x[i] >= -1e-12) {
            let mut w = DVector::zeros(n);
            for i in 0..k {
                w[s[i]] = x[i];
            }
            best = best.min(w.dot(&(q * &w)));
        }
    }
    best
}

// ------------------------------------------------------------------ grouping

/// `J = sum_k n_k ||mean_k - center_k||^2`, recomputed from scratch.
pub fn grouping_objective(vectors: &DMatrix<f64>, centers: &DMatrix<f64>, groups: &[usize]) -> f64 {
    let dim = vectors.ncols();
    let mut total = 0.0;
    for k in 0..centers.nrows() {
        let members: Vec<usize> = (0..groups.len()).filter(|&j| groups[j] == k).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for &j in &members {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += vectors[(j, c)];
            }
        }
        let n = members.len() as f64;
        let dist: f64 = mean
            .iter()
            .enumerate()
            .map(|(c, m)| (m / n - centers[(k, c)]).powi(2))
            .sum();
        total += n * dist;
    }
    total
}

/// Every assignment of `d` items to `k` groups with no empty group.
pub fn all_partitions(d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let total = k.pow(d as u32);
    for code in 0..total {
        let mut c = code;
        let groups: Vec<usize> = (0..d)
            .map(|_| {
                let g = c % k;
                c /= k;
                g
            })
            .collect();
        if (0..k).all(|g| groups.contains(&g)) {
            out.push(groups);
        }
    }
    out
}

pub fn brute_force_grouping(vectors: &DMatrix<f64>, centers: &DMatrix<f64>) -> f64 {
    all_partitions(vectors.nrows(), centers.nrows())
        .iter()
        .map(|g| grouping_objective(vectors, centers, g))
        .fold(f64::INFINITY, f64::min)
}

// ------------------------------------------------------------------ CAM

/// `V(y, x) = sum_j w_j A_j(y, x)` over a flat `[d, H, W]` buffer.
pub fn saliency_oracle(data: &[f64], d: usize, h: usize, w: usize, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for j in 0..d {
                s += weights[j] * data[j * h * w + y * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Bilinear sample of a single output pixel, half-pixel convention.
pub fn bilinear_oracle(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize, oy: usize, ox: usize) -> f64 {
    let map = |o: usize, n: usize, on: usize| -> f64 {
        let s = (o as f64 + 0.5) * (n as f64 / on as f64) - 0.5;
        s.max(0.0).min((n - 1) as f64)
    };
    let sy = map(oy, h, out_h);
    let sx = map(ox, w, out_w);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let v = |y: usize, x: usize| src[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

// ------------------------------------------------------------------ files

/// Relative path to file contents for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

pub fn random_groups(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Vec<usize> {
    (0..d).map(|_| rng.random_range(0..k)).collect()
}
