//! Prunable ReLU networks.
//!
//! A [`Network`] owns one flat parameter vector and one flat binary mask of
//! the same length. Each parametric layer is a contiguous block of that
//! vector. Bias terms are stored inside the block as weights on a constant
//! input of one, so they are ranked and masked like any other weight.

use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        #[serde(default)]
        bias: bool,
    },
    Conv2D {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    ReLU,
    AvgPool {
        k: usize,
        stride: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize) -> Self {
        Self::Dense { input, output, bias: false }
    }

    pub fn dense_bias(input: usize, output: usize) -> Self {
        Self::Dense { input, output, bias: true }
    }

    pub fn conv(in_ch: usize, out_ch: usize, k: usize, padding: usize) -> Self {
        Self::Conv2D {
            in_ch,
            out_ch,
            kh: k,
            kw: k,
            stride: 1,
            padding,
            bias: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dense { .. } => "dense",
            Self::Conv2D { .. } => "conv2d",
            Self::ReLU => "relu",
            Self::AvgPool { .. } => "avgpool",
            Self::Flatten => "flatten",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, Self::Dense { .. } | Self::Conv2D { .. })
    }
}

/// Where a parametric layer lives in the flat vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub offset: usize,
    pub len: usize,
    pub kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    /// Row-major `[rows, cols]`; with a bias the last column is the bias.
    Dense { rows: usize, cols: usize, bias: bool },
    /// Kernel `[out_ch, in_ch, kh, kw]` followed by `out_ch` biases when present.
    Conv { kernel: [usize; 4], bias: bool },
}

impl ParamBlock {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    /// Number of weights that are not bias entries.
    pub fn fan_in(&self) -> usize {
        match &self.kind {
            BlockKind::Dense { cols, bias, .. } => cols - usize::from(*bias),
            BlockKind::Conv { kernel, .. } => kernel[1] * kernel[2] * kernel[3],
        }
    }

    /// True when flat index `idx` (absolute) is a bias entry of this block.
    pub fn is_bias(&self, idx: usize) -> bool {
        let local = idx - self.offset;
        match &self.kind {
            BlockKind::Dense { cols, bias, .. } => *bias && local % cols == cols - 1,
            BlockKind::Conv { kernel, bias } => *bias && local >= kernel.iter().product::<usize>(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Tensor,
    mask: Tensor,
    blocks: Vec<Option<ParamBlock>>,
    shapes: Vec<Vec<usize>>,
}

/// Validates the layer list against a per-example input shape, returning the
/// parameter layout and the per-example output shape after every layer.
fn plan(input_shape: &[usize], layers: &[LayerSpec]) -> Result<(Vec<Option<ParamBlock>>, Vec<Vec<usize>>, usize)> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::InvalidShape(input_shape.to_vec()));
    }
    if layers.is_empty() {
        return Err(Error::InvalidArgument("network needs at least one layer".into()));
    }
    let mut shape = input_shape.to_vec();
    let mut offset = 0;
    let mut blocks = Vec::with_capacity(layers.len());
    let mut shapes = Vec::with_capacity(layers.len());
    let bad = |index: usize, reason: String| Error::IncompatibleLayer { index, reason };
    for (index, layer) in layers.iter().enumerate() {
        let block = match *layer {
            LayerSpec::Dense { input, output, bias } => {
                if shape != [input] {
                    return Err(bad(index, format!("dense expects [{input}], got {shape:?}")));
                }
                if output == 0 {
                    return Err(bad(index, "dense output must be positive".into()));
                }
                let cols = input + usize::from(bias);
                let len = output * cols;
                shape = vec![output];
                Some(ParamBlock {
                    offset,
                    len,
                    kind: BlockKind::Dense { rows: output, cols, bias },
                })
            }
            LayerSpec::Conv2D {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                padding,
                bias,
            } => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(bad(index, format!("conv2d expects [C,H,W], got {shape:?}")));
                };
                if c != in_ch {
                    return Err(bad(index, format!("conv2d expects {in_ch} channels, got {c}")));
                }
                if out_ch == 0 || kh == 0 || kw == 0 {
                    return Err(bad(index, "conv2d extents must be positive".into()));
                }
                let (Some(oh), Some(ow)) = (
                    conv_output_extent(h, kh, stride, padding),
                    conv_output_extent(w, kw, stride, padding),
                ) else {
                    return Err(bad(index, format!("conv2d output extent not positive for {shape:?}")));
                };
                let kernel = [out_ch, in_ch, kh, kw];
                let len = kernel.iter().product::<usize>() + if bias { out_ch } else { 0 };
                shape = vec![out_ch, oh, ow];
                Some(ParamBlock {
                    offset,
                    len,
                    kind: BlockKind::Conv { kernel, bias },
                })
            }
            LayerSpec::ReLU => None,
            LayerSpec::AvgPool { k, stride } => {
                let &[c, h, w] = shape.as_slice() else {
                    return Err(bad(index, format!("avgpool expects [C,H,W], got {shape:?}")));
                };
                let (Some(oh), Some(ow)) = (
                    (k > 0).then(|| conv_output_extent(h, k, stride, 0)).flatten(),
                    (k > 0).then(|| conv_output_extent(w, k, stride, 0)).flatten(),
                ) else {
                    return Err(bad(index, format!("pool window {k} does not fit {shape:?}")));
                };
                shape = vec![c, oh, ow];
                None
            }
            LayerSpec::Flatten => {
                shape = vec![shape.iter().product()];
                None
            }
        };
        if let Some(b) = &block {
            offset += b.len;
        }
        blocks.push(block);
        shapes.push(shape.clone());
    }
    if shape.len() != 1 {
        return Err(bad(layers.len() - 1, format!("network output must be a vector, got {shape:?}")));
    }
    if offset == 0 {
        return Err(Error::InvalidArgument("network has no parameters".into()));
    }
    Ok((blocks, shapes, offset))
}

impl Network {
    /// Builds with Kaiming-normal weights `N(0, sqrt(2 / fan_in))`, zero biases and a full mask.
    pub fn build(input_shape: &[usize], layers: Vec<LayerSpec>, rng: &mut Rng) -> Result<Self> {
        let (blocks, shapes, m) = plan(input_shape, &layers)?;
        let mut params = vec![0.0; m];
        for block in blocks.iter().flatten() {
            let std = (2.0 / block.fan_in() as f64).sqrt();
            for idx in block.range() {
                if !block.is_bias(idx) {
                    params[idx] = std * rng.standard_normal();
                }
            }
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            params: Tensor::new(vec![m], params)?,
            mask: Tensor::ones(&[m]),
            blocks,
            shapes,
        })
    }

    /// Builds with explicit parameter values and a full mask.
    pub fn from_params(input_shape: &[usize], layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let (blocks, shapes, m) = plan(input_shape, &layers)?;
        if params.len() != m {
            return Err(Error::ShapeMismatch {
                op: "from_params",
                lhs: vec![m],
                rhs: vec![params.len()],
            });
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
            params: Tensor::new(vec![m], params)?,
            mask: Tensor::ones(&[m]),
            blocks,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn blocks(&self) -> &[Option<ParamBlock>] {
        &self.blocks
    }

    /// Per-example output shape after layer `i`.
    pub fn shape_after(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        self.params.data()
    }

    pub fn mask(&self) -> &[f64] {
        self.mask.data()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                op: "set_params",
                lhs: vec![self.num_params()],
                rhs: vec![params.len()],
            });
        }
        self.params = Tensor::new(vec![params.len()], params.to_vec())?;
        Ok(())
    }

    pub fn set_mask(&mut self, mask: &[f64]) -> Result<()> {
        if mask.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                op: "set_mask",
                lhs: vec![self.num_params()],
                rhs: vec![mask.len()],
            });
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        self.mask = Tensor::new(vec![mask.len()], mask.to_vec())?;
        Ok(())
    }

    pub fn with_mask(&self, mask: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_mask(mask)?;
        Ok(net)
    }

    pub fn density(&self) -> f64 {
        self.mask.sum() / self.num_params() as f64
    }

    /// `θ ⊙ M`.
    pub fn masked_params(&self) -> Vec<f64> {
        self.params().iter().zip(self.mask()).map(|(p, m)| p * m).collect()
    }

    /// Index of the layer whose block contains flat parameter `idx`.
    pub fn layer_of(&self, idx: usize) -> Option<usize> {
        self.blocks
            .iter()
            .position(|b| b.as_ref().is_some_and(|b| b.range().contains(&idx)))
    }

    pub fn parametric_layers(&self) -> impl Iterator<Item = (usize, &ParamBlock)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| b.as_ref().map(|b| (i, b)))
    }

    /// True when every parametric layer is dense and there is no pooling or conv.
    pub fn is_mlp(&self) -> bool {
        self.layers
            .iter()
            .all(|l| matches!(l, LayerSpec::Dense { .. } | LayerSpec::ReLU))
    }

    pub fn active_output_units(&self) -> Vec<LayerWidth> {
        active_output_units(self)
    }

    pub fn check_connectivity(&self) -> bool {
        check_connectivity(self)
    }
}

/// Active versus total output units of one parametric layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWidth {
    pub layer_index: usize,
    pub layer_name: String,
    pub active_units: usize,
    pub total_units: usize,
}

/// Dense layers count neurons with at least one unmasked incoming weight;
/// conv layers count `(out_ch, in_ch)` kernels with at least one unmasked entry.
pub fn active_output_units(net: &Network) -> Vec<LayerWidth> {
    let mask = net.mask();
    net.parametric_layers()
        .map(|(layer_index, block)| {
            let (active, total) = match &block.kind {
                BlockKind::Dense { rows, cols, .. } => {
                    let active = (0..*rows)
                        .filter(|r| {
                            let start = block.offset + r * cols;
                            mask[start..start + cols].iter().any(|&v| v != 0.0)
                        })
                        .count();
                    (active, *rows)
                }
                BlockKind::Conv { kernel, .. } => {
                    let area = kernel[2] * kernel[3];
                    let kernels = kernel[0] * kernel[1];
                    let active = (0..kernels)
                        .filter(|q| {
                            let start = block.offset + q * area;
                            mask[start..start + area].iter().any(|&v| v != 0.0)
                        })
                        .count();
                    (active, kernels)
                }
            };
            LayerWidth {
                layer_index,
                layer_name: format!("{}{}", net.layers()[layer_index].name(), layer_index),
                active_units: active,
                total_units: total,
            }
        })
        .collect()
}

/// Propagates a reachability bitmask from every input unit through unmasked,
/// non-bias weights. True iff at least one output unit is reached.
pub fn check_connectivity(net: &Network) -> bool {
    let mask = net.mask();
    let mut reach: Vec<bool> = vec![true; net.input_shape().iter().product()];
    let mut shape = net.input_shape().to_vec();
    for (i, layer) in net.layers().iter().enumerate() {
        let next_shape = net.shape_after(i).to_vec();
        reach = match (layer, &net.blocks()[i]) {
            (LayerSpec::Dense { .. }, Some(block)) => {
                let BlockKind::Dense { rows, cols, .. } = block.kind else { unreachable!() };
                (0..rows)
                    .map(|r| {
                        reach
                            .iter()
                            .enumerate()
                            .any(|(c, &ok)| ok && mask[block.offset + r * cols + c] != 0.0)
                    })
                    .collect()
            }
            (LayerSpec::Conv2D { kh, kw, stride, padding, .. }, Some(block)) => {
                let BlockKind::Conv { kernel, .. } = block.kind else { unreachable!() };
                let (ic, ih, iw) = (shape[0], shape[1], shape[2]);
                let (oc, oh, ow) = (next_shape[0], next_shape[1], next_shape[2]);
                let mut out = vec![false; oc * oh * ow];
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            'search: for c in 0..ic {
                                for ky in 0..*kh {
                                    for kx in 0..*kw {
                                        let iy = (oy * stride + ky) as isize - *padding as isize;
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if iy < 0 || ix < 0 || iy as usize >= ih || ix as usize >= iw {
                                            continue;
                                        }
                                        let widx = block.offset + ((o * kernel[1] + c) * kh + ky) * kw + kx;
                                        if mask[widx] != 0.0 && reach[(c * ih + iy as usize) * iw + ix as usize] {
                                            out[(o * oh + oy) * ow + ox] = true;
                                            break 'search;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
            (LayerSpec::AvgPool { k, stride }, _) => {
                let (c, ih, iw) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (next_shape[1], next_shape[2]);
                let mut out = vec![false; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            out[(ch * oh + oy) * ow + ox] = (0..*k).any(|dy| {
                                (0..*k).any(|dx| reach[(ch * ih + oy * stride + dy) * iw + ox * stride + dx])
                            });
                        }
                    }
                }
                out
            }
            // ReLU and Flatten are statically traversable.
            _ => reach,
        };
        shape = next_shape;
    }
    reach.iter().any(|&r| r)
}

/// Desk-scale MLP: six dense layers, ReLU between them.
pub fn mlp6_specs(input_dim: usize, classes: usize, width: usize, bias: bool) -> Vec<LayerSpec> {
    let dense = |i, o| LayerSpec::Dense { input: i, output: o, bias };
    let mut layers = vec![dense(input_dim, width), LayerSpec::ReLU];
    for _ in 0..4 {
        layers.push(dense(width, width));
        layers.push(LayerSpec::ReLU);
    }
    layers.push(dense(width, classes));
    layers
}

/// Desk-scale ConvNet: three 3x3 conv layers with average pooling, one dense head.
/// `input` is `[C, H, W]` with `H` and `W` divisible by 4.
pub fn convnet4_specs(input: [usize; 3], classes: usize, channels: usize) -> Vec<LayerSpec> {
    let [c, h, w] = input;
    let conv = |i, o| LayerSpec::Conv2D {
        in_ch: i,
        out_ch: o,
        kh: 3,
        kw: 3,
        stride: 1,
        padding: 1,
        bias: false,
    };
    vec![
        conv(c, channels),
        LayerSpec::ReLU,
        LayerSpec::AvgPool { k: 2, stride: 2 },
        conv(channels, 2 * channels),
        LayerSpec::ReLU,
        LayerSpec::AvgPool { k: 2, stride: 2 },
        conv(2 * channels, 2 * channels),
        LayerSpec::ReLU,
        LayerSpec::Flatten,
        LayerSpec::dense(2 * channels * (h / 4) * (w / 4), classes),
    ]
}

pub const CHECKPOINT_FORMAT: &str = "pxlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint container: spec list, parameters and mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
    pub mask: Vec<u8>,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            input_shape: net.input_shape().to_vec(),
            layers: net.layers().to_vec(),
            params: net.params().to_vec(),
            mask: net.mask().iter().map(|&v| v as u8).collect(),
        }
    }

    pub fn into_network(self) -> Result<Network> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut net = Network::from_params(&self.input_shape, self.layers, self.params)?;
        let mask: Vec<f64> = self.mask.iter().map(|&v| f64::from(v)).collect();
        net.set_mask(&mask)?;
        Ok(net)
    }

    pub fn save(net: &Network, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Self::from_network(net)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ckpt.into_network()
    }
}
