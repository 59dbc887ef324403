//! Deterministic synthetic stand-in for a color-biased shape dataset.
//!
//! Features are factorized into disjoint channel blocks: one block per shape,
//! one block per color, and a block of pure noise. Color signal is strong and
//! clean, shape signal weaker and noisier, so a head fit on color-biased data
//! picks up a color shortcut. Paired pseudo-embeddings put the six concepts
//! on orthogonal axes.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cam::ActivationStack;
use crate::error::{Error, Result};

pub const SHAPES: [&str; 3] = ["cube", "ball", "cylinder"];
pub const COLORS: [&str; 3] = ["red", "blue", "yellow"];
/// Concept bank order: colors first, then shapes.
pub const CONCEPTS: [&str; 6] = ["red", "blue", "yellow", "cube", "ball", "cylinder"];

/// Color each shape is biased towards: cube/blue, ball/red, cylinder/yellow.
pub const BIASED_COLOR: [usize; 3] = [1, 0, 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// Channels per shape block and per color block.
    pub block: usize,
    pub noise_channels: usize,
    /// Extra embedding dimensions beyond the six concept axes.
    pub nuisance_dims: usize,
    pub baseline: f64,
    pub shape_amplitude: f64,
    pub shape_noise: f64,
    pub color_amplitude: f64,
    pub color_noise: f64,
    pub background_noise: f64,
    pub embedding_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            block: 32,
            noise_channels: 64,
            nuisance_dims: 10,
            baseline: 0.2,
            shape_amplitude: 1.0,
            shape_noise: 0.8,
            color_amplitude: 1.0,
            color_noise: 0.15,
            background_noise: 0.3,
            embedding_noise: 0.3,
        }
    }
}

impl SynthParams {
    pub fn feature_dim(&self) -> usize {
        6 * self.block + self.noise_channels
    }

    pub fn embedding_dim(&self) -> usize {
        CONCEPTS.len() + self.nuisance_dims
    }

    pub fn shape_block(&self, shape: usize) -> Range<usize> {
        shape * self.block..(shape + 1) * self.block
    }

    pub fn color_block(&self, color: usize) -> Range<usize> {
        let start = 3 * self.block + color * self.block;
        start..start + self.block
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub params: SynthParams,
    /// `[n, d_feat]` nonnegative pooled features.
    pub features: DMatrix<f64>,
    pub shapes: Vec<usize>,
    pub colors: Vec<usize>,
    /// `[n, D]` unit-norm image pseudo-embeddings.
    pub image_embeddings: DMatrix<f64>,
    /// Object position per image, in `[0, 1)^2`, used for spatial maps.
    pub positions: Vec<(f64, f64)>,
}

impl SynthData {
    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shape_names(&self) -> Vec<String> {
        self.shapes.iter().map(|&s| SHAPES[s].to_string()).collect()
    }

    pub fn color_names(&self) -> Vec<String> {
        self.colors.iter().map(|&c| COLORS[c].to_string()).collect()
    }

    /// `[d, H, W]` feature maps for image `i`: every channel is its pooled
    /// value times a unit-mean bump centred on the object, so spatial
    /// averaging recovers the pooled feature.
    pub fn activation_stack(&self, i: usize, height: usize, width: usize) -> Result<ActivationStack> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange { index: i, len: self.len() });
        }
        let (py, px) = self.positions[i];
        let (cy, cx) = (py * height as f64, px * width as f64);
        let sigma = 0.2 * height.max(width) as f64;
        let mut bump: Vec<f64> = (0..height * width)
            .map(|p| {
                let (y, x) = ((p / width) as f64 + 0.5, (p % width) as f64 + 0.5);
                0.05 + (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let mean = bump.iter().sum::<f64>() / bump.len() as f64;
        for b in &mut bump {
            *b /= mean;
        }
        let d = self.features.ncols();
        let mut data = Vec::with_capacity(d * height * width);
        for j in 0..d {
            let z = self.features[(i, j)];
            data.extend(bump.iter().map(|b| z * b));
        }
        ActivationStack::new(d, height, width, data)
    }
}

/// Concept pseudo-embeddings: the standard basis axes `0..6`, `[6, D]`.
pub fn concept_embeddings(params: &SynthParams) -> DMatrix<f64> {
    DMatrix::from_fn(CONCEPTS.len(), params.embedding_dim(), |i, j| if i == j { 1.0 } else { 0.0 })
}

/// Draws a color for `shape`: the biased color with probability `bias`,
/// otherwise one of the other two uniformly.
fn draw_color(rng: &mut impl Rng, shape: usize, bias: f64) -> usize {
    let favoured = BIASED_COLOR[shape];
    if rng.random::<f64>() < bias {
        favoured
    } else {
        let others: Vec<usize> = (0..3).filter(|&c| c != favoured).collect();
        others[rng.random_range(0..2)]
    }
}

/// Generates `n_per_class` images of each shape with the given color bias.
pub fn synth_clevr_features(seed: u64, n_per_class: usize, bias: f64) -> Result<SynthData> {
    synth_with_params(seed, n_per_class, bias, SynthParams::default())
}

pub fn synth_with_params(seed: u64, n_per_class: usize, bias: f64, params: SynthParams) -> Result<SynthData> {
    if !(0.0..=1.0).contains(&bias) {
        return Err(Error::invariant(format!("bias must be in [0, 1], got {bias}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.feature_dim();
    let dim = params.embedding_dim();
    let n = 3 * n_per_class;

    // Fixed per-channel gains, drawn first so they depend only on the seed.
    let gains: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();

    let mut features = DMatrix::<f64>::zeros(n, d);
    let mut embeddings = DMatrix::<f64>::zeros(n, dim);
    let mut shapes = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };

    // Interleave classes so any prefix is roughly balanced.
    let mut rng_order = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for i in 0..n {
        let shape = i % 3;
        let color = draw_color(&mut rng_order, shape, bias);
        let position = (rng_order.random_range(0.2..0.8), rng_order.random_range(0.2..0.8));
        shapes.push(shape);
        colors.push(color);
        positions.push(position);

        for j in 0..d {
            let (amplitude, noise) = if params.shape_block(shape).contains(&j) {
                (params.shape_amplitude, params.shape_noise)
            } else if j < 3 * params.block {
                (0.0, params.shape_noise)
            } else if params.color_block(color).contains(&j) {
                (params.color_amplitude, params.color_noise)
            } else if j < 6 * params.block {
                (0.0, params.color_noise)
            } else {
                (0.0, params.background_noise)
            };
            let v = params.baseline + amplitude * gains[j] + noise * gauss();
            features[(i, j)] = v.max(0.0);
        }

        let mut e = DVector::<f64>::from_fn(dim, |_, _| params.embedding_noise * gauss());
        e[color] += 1.0;
        e[3 + shape] += 1.0;
        let norm = e.norm();
        embeddings.set_row(i, &(e / norm).transpose());
    }

    Ok(SynthData {
        params,
        features,
        shapes,
        colors,
        image_embeddings: embeddings,
        positions,
    })
}

/// Closed-form ridge least-squares fit of a bias-free linear head to one-hot
/// targets: `W = Y' Z (Z'Z + lambda I)^{-1}`, `[classes, d]`.
pub fn fit_linear_head(features: &DMatrix<f64>, labels: &[usize], classes: usize, lambda: f64) -> Result<DMatrix<f64>> {
    if labels.len() != features.nrows() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: features.nrows(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::IndexOutOfRange { index: bad, len: classes });
    }
    let d = features.ncols();
    let mut targets = DMatrix::<f64>::zeros(features.nrows(), classes);
    for (i, &l) in labels.iter().enumerate() {
        targets[(i, l)] = 1.0;
    }
    let gram = features.transpose() * features + DMatrix::<f64>::identity(d, d) * lambda;
    let rhs = features.transpose() * targets;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invariant("ridge system is not positive definite"))?;
    Ok(chol.solve(&rhs).transpose())
}
