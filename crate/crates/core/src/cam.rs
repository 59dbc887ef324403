//! Class activation maps: channel scores, channel weights, the weighted
//! channel sum, and heatmap rendering.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::Tensor;

/// Feature maps of one image at the explained layer, `[d, H, W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ActivationStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "activation stack dims must be positive, got [{channels}, {height}, {width}]"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "[{channels}, {height}, {width}] needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                name: "activation stack".into(),
                index: i,
            });
        }
        Ok(ActivationStack {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [d, h, w] => Self::new(d, h, w, t.to_f64()),
            ref other => Err(Error::shape(format!(
                "activation stack must be [d, H, W], got {other:?}"
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.channels, self.height, self.width], &self.data)
            .expect("stack dims are consistent")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The `H*W` values of channel `j`.
    pub fn channel(&self, j: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[j * hw..(j + 1) * hw]
    }

    fn same_dims(&self, other: &ActivationStack) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Head,
    Gradcam,
    Layercam,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Spatial mean of the raw gradient.
    Gradcam,
    /// Spatial mean of the positive part of the gradient.
    Layercam,
}

/// Per-channel importance `w^c` for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub values: Vec<f64>,
    pub class_index: usize,
    pub source: WeightSource,
}

impl ChannelWeights {
    pub fn new(values: Vec<f64>, class_index: usize, source: WeightSource) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                name: "channel weights".into(),
                index: i,
            });
        }
        Ok(ChannelWeights {
            values,
            class_index,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl SaliencyMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// ReLU followed by division by the maximum (when positive).
    pub fn normalize(&self) -> SaliencyMap {
        let mut values: Vec<f64> = self.values.iter().map(|&v| v.max(0.0)).collect();
        let max = values.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut values {
                *v /= max;
            }
            // Guard against x/max rounding a hair above 1.
            for v in &mut values {
                *v = v.min(1.0);
            }
        }
        SaliencyMap {
            height: self.height,
            width: self.width,
            values,
            normalized: true,
        }
    }
}

/// Global average pooling of every channel.
pub fn gap(stack: &ActivationStack) -> Vec<f64> {
    let hw = (stack.height * stack.width) as f64;
    (0..stack.channels)
        .map(|j| stack.channel(j).iter().sum::<f64>() / hw)
        .collect()
}

/// CAM weights taken from row `class_index` of a `[C, d]` classifier head.
pub fn weights_from_head(head: &DMatrix<f64>, class_index: usize) -> Result<ChannelWeights> {
    if class_index >= head.nrows() {
        return Err(Error::IndexOutOfRange {
            index: class_index,
            len: head.nrows(),
        });
    }
    ChannelWeights::new(
        head.row(class_index).iter().copied().collect(),
        class_index,
        WeightSource::Head,
    )
}

/// Channel weights from class-score gradients at the explained layer.
pub fn weights_from_gradients(
    stack: &ActivationStack,
    gradients: &ActivationStack,
    mode: GradientMode,
    class_index: usize,
) -> Result<ChannelWeights> {
    if !stack.same_dims(gradients) {
        return Err(Error::shape(format!(
            "gradients [{}, {}, {}] do not match activations [{}, {}, {}]",
            gradients.channels,
            gradients.height,
            gradients.width,
            stack.channels,
            stack.height,
            stack.width
        )));
    }
    let hw = (gradients.height * gradients.width) as f64;
    let values = (0..gradients.channels)
        .map(|j| {
            let g = gradients.channel(j);
            match mode {
                GradientMode::Gradcam => g.iter().sum::<f64>() / hw,
                GradientMode::Layercam => g.iter().map(|v| v.max(0.0)).sum::<f64>() / hw,
            }
        })
        .collect();
    let source = match mode {
        GradientMode::Gradcam => WeightSource::Gradcam,
        GradientMode::Layercam => WeightSource::Layercam,
    };
    ChannelWeights::new(values, class_index, source)
}

/// Weighted channel sum restricted to the channels where `include(j)` holds.
pub(crate) fn weighted_sum(
    stack: &ActivationStack,
    weights: &ChannelWeights,
    include: impl Fn(usize) -> bool,
) -> Result<SaliencyMap> {
    if weights.len() != stack.channels {
        return Err(Error::shape(format!(
            "{} channel weights for a stack with {} channels",
            weights.len(),
            stack.channels
        )));
    }
    let hw = stack.height * stack.width;
    let mut values = vec![0.0; hw];
    for (j, &w) in weights.values.iter().enumerate() {
        if !include(j) {
            continue;
        }
        for (acc, &a) in values.iter_mut().zip(stack.channel(j)) {
            *acc += w * a;
        }
    }
    Ok(SaliencyMap {
        height: stack.height,
        width: stack.width,
        values,
        normalized: false,
    })
}

/// `V = sum_j w_j A_j`, with no rectification.
pub fn saliency(stack: &ActivationStack, weights: &ChannelWeights) -> Result<SaliencyMap> {
    weighted_sum(stack, weights, |_| true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    #[default]
    Gray,
    Jet,
}

static JET: &[u8; 768] = include_bytes!("../data/jet.bin");

/// 8-bit heatmap, either one or three channels per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub colormap: Colormap,
    /// Grayscale levels before colormapping, row-major.
    pub levels: Vec<u8>,
}

impl Heatmap {
    pub fn pixels(&self) -> Vec<u8> {
        match self.colormap {
            Colormap::Gray => self.levels.clone(),
            Colormap::Jet => self
                .levels
                .iter()
                .flat_map(|&l| {
                    let i = usize::from(l) * 3;
                    [JET[i], JET[i + 1], JET[i + 2]]
                })
                .collect(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(match self.colormap {
                Colormap::Gray => png::ColorType::Grayscale,
                Colormap::Jet => png::ColorType::Rgb,
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::invariant(format!("png header: {e}")))?;
            writer
                .write_image_data(&self.pixels())
                .map_err(|e| Error::invariant(format!("png data: {e}")))?;
        }
        Ok(out)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode_png()?;
        crate::write_atomic(path.as_ref(), &bytes)
    }
}

fn sample_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    // Half-pixel centres: pixel i covers [i, i+1) and is sampled at i + 0.5.
    let src = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(map: &SaliencyMap, out_h: usize, out_w: usize) -> Vec<f64> {
    let xs: Vec<_> = (0..out_w).map(|x| sample_coord(x, map.width, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = sample_coord(y, map.height, out_h);
        for &(x0, x1, fx) in &xs {
            let top = map.at(y0, x0) * (1.0 - fx) + map.at(y0, x1) * fx;
            let bottom = map.at(y1, x0) * (1.0 - fx) + map.at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// ReLU, max-normalize to `[0, 1]`, upsample to `out_h x out_w`, quantize.
pub fn render(map: &SaliencyMap, out_h: usize, out_w: usize, colormap: Colormap) -> Result<Heatmap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("render size must be positive"));
    }
    let normalized = map.normalize();
    let levels = resize_bilinear(&normalized, out_h, out_w)
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(Heatmap {
        width: out_w,
        height: out_h,
        colormap,
        levels,
    })
}
