//! Path-exclusion saliency and the two data-free path-norm baselines.

use super::SaliencyScores;
use crate::autodiff::{forward, forward_with, ActivationMode, ActivationRecord, ForwardConfig, ForwardPass, PoolScaling};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

/// Detached g pass: input `x²`, every weight `1 ⊙ M`, ReLUs forced to `record`.
///
/// Returns `[N, K]`; entry `(n, k)` is the sum of `Π x_s²` over the open
/// live paths from the inputs of example `n` to output `k`.
pub fn g_outputs(net: &Network, x: &Tensor, record: &ActivationRecord) -> Result<Tensor> {
    let ones = vec![1.0; net.num_params()];
    let x_sq = x.map(|v| v * v)?;
    let cfg = ForwardConfig::with_mode(ActivationMode::Forced(record))
        .pooling(PoolScaling::Unit)
        .detached();
    Ok(forward_with(net, &ones, &x_sq, cfg)?.output)
}

/// Taped h pass: all-ones input, ReLUs bypassed, the given (squared) weights.
pub fn h_forward(net: &Network, weights: &[f64]) -> Result<ForwardPass> {
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    let cfg = ForwardConfig::with_mode(ActivationMode::PassThrough).pooling(PoolScaling::Squared);
    forward_with(net, weights, &Tensor::ones(&shape), cfg)
}

/// Rescales non-negative per-parameter weights so that each layer's largest
/// unmasked non-bias entry becomes one.
///
/// Layer `l` gets factor `c_l`; its biases get `Π_{l' ≤ l} c_{l'}`, so every
/// path (input- or bias-started) is multiplied by the same `C = Π_l c_l`.
/// Returns the rescaled weights and `ln C`.
pub fn guard_scale(net: &Network, base: &[f64]) -> (Vec<f64>, f64) {
    let mask = net.mask();
    let mut out = base.to_vec();
    let mut log_scale = 0.0;
    for (_, block) in net.parametric_layers() {
        let max = block
            .range()
            .filter(|&j| mask[j] != 0.0 && !block.is_bias(j))
            .map(|j| base[j])
            .fold(0.0, f64::max);
        let c = if max > 0.0 && max.is_finite() { 1.0 / max } else { 1.0 };
        log_scale += c.ln();
        let cumulative = log_scale.exp();
        for j in block.range() {
            out[j] *= if block.is_bias(j) { cumulative } else { c };
        }
    }
    (out, log_scale)
}

fn prepare(net: &Network, base: Vec<f64>, guard: bool) -> (Vec<f64>, f64) {
    if guard {
        guard_scale(net, &base)
    } else {
        (base, 0.0)
    }
}

/// Returns `(∂(seed · h)/∂w) ⊙ w` and checks that `seed · h` is finite.
fn path_scores(pass: &ForwardPass, seed: &Tensor, w: &[f64], what: &'static str) -> Result<Vec<f64>> {
    let r: f64 = pass.output.data().iter().zip(seed.data()).map(|(a, b)| a * b).sum();
    if !r.is_finite() {
        return Err(Error::NonFinite(what));
    }
    let grads = pass.backward(seed)?;
    let scores: Vec<f64> = grads.iter().zip(w).map(|(g, w)| g * w).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(scores)
}

fn squared(net: &Network) -> Vec<f64> {
    net.masked_params().iter().map(|t| t * t).collect()
}

/// PX saliency summed over `batches`; every entry is non-negative.
///
/// With `guard` the squared weights are rescaled by [`guard_scale`]; the
/// scores are then the plain scores times `exp(log_scale)`.
pub fn px_saliency(net: &Network, batches: &[Tensor], guard: bool) -> Result<SaliencyScores> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("PX needs at least one batch".into()));
    }
    let k = net.output_dim();
    let mut seed = Tensor::zeros(&[1, k]);
    for x in batches {
        let record = forward(net, x, ActivationMode::Standard)?.record;
        let g = g_outputs(net, x, &record)?;
        for row in g.data().chunks(k) {
            for (s, v) in seed.data_mut().iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    if seed.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PX data term"));
    }
    let (w, log_scale) = prepare(net, squared(net), guard);
    let h = h_forward(net, &w)?;
    Ok(SaliencyScores {
        values: path_scores(&h, &seed, &w, "PX objective")?,
        log_scale,
    })
}

/// SynFlow-L2: the h pass on `θ²` seeded with ones.
pub fn synflow_l2_saliency(net: &Network, guard: bool) -> Result<SaliencyScores> {
    let (w, log_scale) = prepare(net, squared(net), guard);
    let h = h_forward(net, &w)?;
    let seed = Tensor::ones(h.output.shape());
    Ok(SaliencyScores {
        values: path_scores(&h, &seed, &w, "SynFlow-L2 objective")?,
        log_scale,
    })
}

/// SynFlow: all-ones input through `|θ|` with ReLUs bypassed and standard pooling.
pub fn synflow_saliency(net: &Network, guard: bool) -> Result<SaliencyScores> {
    let abs: Vec<f64> = net.masked_params().iter().map(|t| t.abs()).collect();
    let (w, log_scale) = prepare(net, abs, guard);
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    let pass = forward_with(
        net,
        &w,
        &Tensor::ones(&shape),
        ForwardConfig::with_mode(ActivationMode::PassThrough),
    )?;
    let seed = Tensor::ones(pass.output.shape());
    Ok(SaliencyScores {
        values: path_scores(&pass, &seed, &w, "SynFlow objective")?,
        log_scale,
    })
}
