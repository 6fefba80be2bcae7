//! Tape-based reverse-mode differentiation and the network forward pass.
//!
//! A forward pass can run its ReLUs in one of three modes:
//! - `Standard`: ordinary ReLU, the indicators are recorded;
//! - `Forced`: each ReLU multiplies its pre-activation by a supplied record;
//! - `PassThrough`: every ReLU is the identity.
//!
//! Gradients are taken with respect to whatever weight vector was passed to
//! [`forward_with`] (not necessarily `θ`), and are zero at masked positions.

use crate::error::{Error, Result};
use crate::model::{BlockKind, LayerSpec, Network};
use crate::tensor::{conv2d, conv2d_adjoint, pool2d, pool2d_adjoint, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { offset: usize },
    /// `a · wᵀ`
    MatMulT { a: Var, w: Var },
    AppendOnes { a: Var },
    Conv2d { x: Var, k: Var, stride: usize, padding: usize },
    AddChannelBias { x: Var, b: Var },
    Gate { x: Var, gate: Tensor },
    Pool { x: Var, k: usize, stride: usize, coefficient: f64 },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive applications over a flat parameter vector.
///
/// A detached tape stores values only; differentiating it is an error.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    param_len: usize,
    detached: bool,
}

impl Tape {
    pub fn new(param_len: usize) -> Self {
        Self {
            nodes: Vec::new(),
            param_len,
            detached: false,
        }
    }

    pub fn detached(param_len: usize) -> Self {
        Self {
            detached: true,
            ..Self::new(param_len)
        }
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let op = if self.detached { Op::Constant } else { op };
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Leaf holding `values`, which occupy `offset..offset + values.len()` of the flat parameters.
    pub fn param(&mut self, offset: usize, value: Tensor) -> Result<Var> {
        if offset + value.len() > self.param_len {
            return Err(Error::InvalidArgument(format!(
                "parameter slice {}..{} exceeds {}",
                offset,
                offset + value.len(),
                self.param_len
            )));
        }
        Ok(self.push(Op::Param { offset }, value))
    }

    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let value = self.value(a).matmul_transposed(self.value(w))?;
        Ok(self.push(Op::MatMulT { a, w }, value))
    }

    pub fn append_ones(&mut self, a: Var) -> Result<Var> {
        let value = append_ones(self.value(a))?;
        Ok(self.push(Op::AppendOnes { a }, value))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = conv2d(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(Op::Conv2d { x, k, stride, padding }, value))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = add_channel_bias(self.value(x), self.value(b))?;
        Ok(self.push(Op::AddChannelBias { x, b }, value))
    }

    /// Multiplies by a constant tensor (a ReLU indicator or a forced record).
    pub fn gate(&mut self, x: Var, gate: Tensor) -> Result<Var> {
        let value = self.value(x).zip_map(&gate, "gate", |a, g| a * g)?;
        let gate = if self.detached { Tensor::scalar(0.0) } else { gate };
        Ok(self.push(Op::Gate { x, gate }, value))
    }

    pub fn pool(&mut self, x: Var, k: usize, stride: usize, coefficient: f64) -> Result<Var> {
        let value = pool2d(self.value(x), k, stride, coefficient)?;
        Ok(self.push(Op::Pool { x, k, stride, coefficient }, value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum { x }, value)
    }

    /// Recomputes every node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        if self.detached {
            return Err(Error::DetachedTape);
        }
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |x: &Var| &vals[x.0];
            let value = match &node.op {
                Op::Constant | Op::Param { .. } => node.value.clone(),
                Op::MatMulT { a, w } => v(a).matmul_transposed(v(w))?,
                Op::AppendOnes { a } => append_ones(v(a))?,
                Op::Conv2d { x, k, stride, padding } => conv2d(v(x), v(k), *stride, *padding)?,
                Op::AddChannelBias { x, b } => add_channel_bias(v(x), v(b))?,
                Op::Gate { x, gate } => v(x).zip_map(gate, "gate", |a, g| a * g)?,
                Op::Pool { x, k, stride, coefficient } => pool2d(v(x), *k, *stride, *coefficient)?,
                Op::Reshape { x } => v(x).reshape(node.value.shape())?,
                Op::Add { a, b } => v(a).zip_map(v(b), "add", |x, y| x + y)?,
                Op::Mul { a, b } => v(a).zip_map(v(b), "mul", |x, y| x * y)?,
                Op::Sum { x } => Tensor::scalar(v(x).sum()),
            };
            vals.push(value);
        }
        Ok(vals)
    }

    /// Returns `∂(seed · value(output)) / ∂params` as a flat vector of the tape's parameter length.
    ///
    /// The tape is not consumed, so several seeds can be pulled back through one forward pass.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Vec<f64>> {
        if self.detached {
            return Err(Error::DetachedTape);
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.value(output).shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed.clone());
        let mut grads = vec![0.0; self.param_len];

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
            match slot {
                Some(existing) => *existing = existing.zip_map(&g, "accumulate", |a, b| a + b)?,
                None => *slot = Some(g),
            }
            Ok(())
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (dst, src) in grads[*offset..*offset + g.len()].iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
                Op::MatMulT { a, w } => {
                    let ga = g.matmul(self.value(*w))?;
                    let gw = g.transpose()?.matmul(self.value(*a))?;
                    accumulate(&mut adj[a.0], ga)?;
                    accumulate(&mut adj[w.0], gw)?;
                }
                Op::AppendOnes { a } => {
                    let (rows, cols) = g.dims2("append_ones")?;
                    let data: Vec<f64> = (0..rows)
                        .flat_map(|r| g.data()[r * cols..r * cols + cols - 1].iter().copied())
                        .collect();
                    accumulate(&mut adj[a.0], Tensor::new(vec![rows, cols - 1], data)?)?;
                }
                Op::Conv2d { x, k, stride, padding } => {
                    let (gx, gk) = conv2d_adjoint(self.value(*x), self.value(*k), &g, *stride, *padding)?;
                    accumulate(&mut adj[x.0], gx)?;
                    accumulate(&mut adj[k.0], gk)?;
                }
                Op::AddChannelBias { x, b } => {
                    let (n, c, h, w) = g.dims4("add_channel_bias")?;
                    let mut gb = vec![0.0; c];
                    for (idx, v) in g.data().iter().enumerate() {
                        gb[(idx / (h * w)) % c] += v;
                    }
                    let _ = n;
                    accumulate(&mut adj[b.0], Tensor::new(vec![c], gb)?)?;
                    accumulate(&mut adj[x.0], g)?;
                }
                Op::Gate { x, gate } => {
                    accumulate(&mut adj[x.0], g.zip_map(gate, "gate", |a, m| a * m)?)?;
                }
                Op::Pool { x, k, stride, coefficient } => {
                    let gx = pool2d_adjoint(self.value(*x).shape(), &g, *k, *stride, *coefficient)?;
                    accumulate(&mut adj[x.0], gx)?;
                }
                Op::Reshape { x } => {
                    accumulate(&mut adj[x.0], g.reshape(self.value(*x).shape())?)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj[a.0], g.clone())?;
                    accumulate(&mut adj[b.0], g)?;
                }
                Op::Mul { a, b } => {
                    accumulate(&mut adj[a.0], g.zip_map(self.value(*b), "mul", |x, y| x * y)?)?;
                    accumulate(&mut adj[b.0], g.zip_map(self.value(*a), "mul", |x, y| x * y)?)?;
                }
                Op::Sum { x } => {
                    let s = g.data()[0];
                    accumulate(&mut adj[x.0], Tensor::filled(self.value(*x).shape(), s))?;
                }
            }
        }
        if grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(grads)
    }
}

fn append_ones(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.dims2("append_ones")?;
    let mut data = Vec::with_capacity(rows * (cols + 1));
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * cols..(r + 1) * cols]);
        data.push(1.0);
    }
    Tensor::new(vec![rows, cols + 1], data)
}

fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4("add_channel_bias")?;
    if b.len() != c {
        return Err(Error::ShapeMismatch {
            op: "add_channel_bias",
            lhs: x.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[(idx / (h * w)) % c];
    }
    out.map(|v| v)
}

/// Per-ReLU-site binary tensors, one per activation layer, batch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub sites: Vec<Tensor>,
}

impl ActivationRecord {
    /// A record that opens every ReLU of `net` for a batch of `batch` examples.
    pub fn all_open(net: &Network, batch: usize) -> Self {
        let sites = net
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::ReLU))
            .map(|(i, _)| {
                let mut shape = vec![batch];
                shape.extend_from_slice(net.shape_after(i));
                Tensor::ones(&shape)
            })
            .collect();
        Self { sites }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ActivationMode<'a> {
    Standard,
    Forced(&'a ActivationRecord),
    PassThrough,
}

/// Fixed coefficient applied by average-pooling layers.
///
/// Pooling is a linear layer with constant weight `1/k²`. A pass that
/// replaces every weight by one uses `Unit`; a pass on squared weights uses
/// `Squared` (`1/k⁴`), keeping the path formalism consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolScaling {
    Standard,
    Unit,
    Squared,
}

impl PoolScaling {
    fn coefficient(self, k: usize) -> f64 {
        let area = (k * k) as f64;
        match self {
            Self::Standard => 1.0 / area,
            Self::Unit => 1.0,
            Self::Squared => 1.0 / (area * area),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardConfig<'a> {
    pub activations: ActivationMode<'a>,
    pub pooling: PoolScaling,
    /// When false the pass is detached: values only, no adjoint information.
    pub taped: bool,
}

impl<'a> ForwardConfig<'a> {
    pub fn standard() -> Self {
        Self {
            activations: ActivationMode::Standard,
            pooling: PoolScaling::Standard,
            taped: true,
        }
    }

    pub fn with_mode(mode: ActivationMode<'a>) -> Self {
        Self {
            activations: mode,
            ..Self::standard()
        }
    }

    pub fn detached(mut self) -> Self {
        self.taped = false;
        self
    }

    pub fn pooling(mut self, pooling: PoolScaling) -> Self {
        self.pooling = pooling;
        self
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Tensor,
    pub record: ActivationRecord,
    pub tape: Tape,
    output_var: Var,
    mask: Vec<f64>,
}

impl ForwardPass {
    /// Pulls `seed` back to the weights of the pass; masked positions are exactly zero.
    pub fn backward(&self, seed: &Tensor) -> Result<Vec<f64>> {
        let mut grads = self.tape.backward(self.output_var, seed)?;
        for (g, m) in grads.iter_mut().zip(&self.mask) {
            *g *= m;
        }
        Ok(grads)
    }

    pub fn output_var(&self) -> Var {
        self.output_var
    }
}

/// Forward at `θ ⊙ M` with standard pooling.
pub fn forward(net: &Network, input: &Tensor, mode: ActivationMode<'_>) -> Result<ForwardPass> {
    forward_with(net, net.params(), input, ForwardConfig::with_mode(mode))
}

pub fn backward(pass: &ForwardPass, seed: &Tensor) -> Result<Vec<f64>> {
    pass.backward(seed)
}

/// Forward with an arbitrary weight vector `weights` (masked by the network's mask).
///
/// `input` is batch-major: `[N, ..input_shape]`.
pub fn forward_with(net: &Network, weights: &[f64], input: &Tensor, cfg: ForwardConfig<'_>) -> Result<ForwardPass> {
    let m = net.num_params();
    if weights.len() != m {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: vec![m],
            rhs: vec![weights.len()],
        });
    }
    if input.rank() != net.input_shape().len() + 1 || &input.shape()[1..] != net.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "forward input",
            lhs: net.input_shape().to_vec(),
            rhs: input.shape().to_vec(),
        });
    }
    let batch = input.shape()[0];
    let effective: Vec<f64> = weights.iter().zip(net.mask()).map(|(w, k)| w * k).collect();
    let mut tape = if cfg.taped { Tape::new(m) } else { Tape::detached(m) };
    let mut record = ActivationRecord { sites: Vec::new() };
    let mut site = 0;
    let mut x = tape.constant(input.clone());

    for (i, layer) in net.layers().iter().enumerate() {
        let at_layer = |e: Error| match e {
            Error::NonFinite(kind) => Error::NonFiniteLayer { layer: i, kind },
            other => other,
        };
        x = match (layer, &net.blocks()[i]) {
            (LayerSpec::Dense { .. }, Some(block)) => {
                let BlockKind::Dense { rows, cols, bias } = block.kind else { unreachable!() };
                let w = Tensor::new(vec![rows, cols], effective[block.range()].to_vec()).map_err(at_layer)?;
                let w = tape.param(block.offset, w)?;
                let a = if bias { tape.append_ones(x).map_err(at_layer)? } else { x };
                tape.matmul_t(a, w).map_err(at_layer)?
            }
            (LayerSpec::Conv2D { stride, padding, .. }, Some(block)) => {
                let BlockKind::Conv { kernel, bias } = block.kind else { unreachable!() };
                let klen: usize = kernel.iter().product();
                let k = Tensor::new(kernel.to_vec(), effective[block.offset..block.offset + klen].to_vec())
                    .map_err(at_layer)?;
                let k = tape.param(block.offset, k)?;
                let y = tape.conv2d(x, k, *stride, *padding).map_err(at_layer)?;
                if bias {
                    let b = Tensor::new(vec![kernel[0]], effective[block.offset + klen..block.offset + block.len].to_vec())
                        .map_err(at_layer)?;
                    let b = tape.param(block.offset + klen, b)?;
                    tape.add_channel_bias(y, b).map_err(at_layer)?
                } else {
                    y
                }
            }
            (LayerSpec::ReLU, _) => {
                let out = match cfg.activations {
                    ActivationMode::Standard => {
                        let ind = tape.value(x).map(|z| if z > 0.0 { 1.0 } else { 0.0 })?;
                        record.sites.push(ind.clone());
                        tape.gate(x, ind).map_err(at_layer)?
                    }
                    ActivationMode::Forced(forced) => {
                        let gate = forced.sites.get(site).ok_or_else(|| {
                            Error::RecordMismatch(format!("record has {} sites, layer {i} needs site {site}", forced.sites.len()))
                        })?;
                        if gate.shape() != tape.value(x).shape() {
                            return Err(Error::RecordMismatch(format!(
                                "site {site}: record shape {:?} vs pre-activation {:?}",
                                gate.shape(),
                                tape.value(x).shape()
                            )));
                        }
                        record.sites.push(gate.clone());
                        tape.gate(x, gate.clone()).map_err(at_layer)?
                    }
                    ActivationMode::PassThrough => {
                        record.sites.push(Tensor::ones(tape.value(x).shape()));
                        x
                    }
                };
                site += 1;
                out
            }
            (LayerSpec::AvgPool { k, stride }, _) => tape
                .pool(x, *k, *stride, cfg.pooling.coefficient(*k))
                .map_err(at_layer)?,
            (LayerSpec::Flatten, _) => {
                let mut shape = vec![batch];
                shape.extend_from_slice(net.shape_after(i));
                tape.reshape(x, &shape)?
            }
            _ => unreachable!("parametric layer without a block"),
        };
    }
    if let ActivationMode::Forced(forced) = cfg.activations {
        if forced.sites.len() != site {
            return Err(Error::RecordMismatch(format!(
                "record has {} sites, network has {site}",
                forced.sites.len()
            )));
        }
    }
    Ok(ForwardPass {
        output: tape.value(x).clone(),
        record,
        tape,
        output_var: x,
        mask: net.mask().to_vec(),
    })
}

/// Scalar read-out used by [`grad_check`].
#[derive(Debug, Clone)]
pub enum ScalarHead {
    Sum,
    Weighted(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU; they are not compared.
    pub skipped: Vec<usize>,
}

/// Compares backward against central differences for every unmasked parameter.
pub fn grad_check(net: &Network, input: &Tensor, head: &ScalarHead, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let base = forward(net, input, ActivationMode::Standard)?;
    let seed = match head {
        ScalarHead::Sum => Tensor::ones(base.output.shape()),
        ScalarHead::Weighted(w) => w.clone(),
    };
    let analytic = base.backward(&seed)?;
    let read = |out: &Tensor| -> f64 { out.data().iter().zip(seed.data()).map(|(a, b)| a * b).sum() };

    let mut params = net.params().to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: Vec::new(),
    };
    for j in 0..params.len() {
        if net.mask()[j] == 0.0 {
            continue;
        }
        let orig = params[j];
        params[j] = orig + eps;
        let plus = forward_with(net, &params, input, ForwardConfig::standard().detached())?;
        params[j] = orig - eps;
        let minus = forward_with(net, &params, input, ForwardConfig::standard().detached())?;
        params[j] = orig;
        if plus.record != base.record || minus.record != base.record {
            report.skipped.push(j);
            continue;
        }
        let numeric = (read(&plus.output) - read(&minus.output)) / (2.0 * eps);
        let err = (numeric - analytic[j]).abs() / (numeric.abs() + analytic[j].abs()).max(1e-6);
        report.max_rel_err = report.max_rel_err.max(err);
        report.checked += 1;
    }
    Ok(report)
}
