//! Loss-based and static pruning-at-initialization baselines.

use super::SaliencyScores;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Rng;
use crate::train::loss_and_grad;

fn summed_grad(net: &Network, weights: &[f64], batches: &[Batch]) -> Result<Vec<f64>> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("loss-based saliency needs at least one batch".into()));
    }
    let mut total = vec![0.0; net.num_params()];
    for b in batches {
        let (loss, g) = loss_and_grad(net, weights, &b.x, &b.y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss"));
        }
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok(total)
}

/// SNIP: `|(Σ_b ∂L_b/∂θ) ⊙ θ|`.
pub fn snip_saliency(net: &Network, batches: &[Batch]) -> Result<SaliencyScores> {
    let theta = net.masked_params();
    let g = summed_grad(net, &theta, batches)?;
    Ok(SaliencyScores::plain(g.iter().zip(&theta).map(|(g, t)| (g * t).abs()).collect()))
}

/// Central-difference Hessian-vector product `(∇(θ + εv) − ∇(θ − εv)) / 2ε`.
pub fn finite_difference_hvp<F>(grad_fn: F, theta: &[f64], direction: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    if theta.len() != direction.len() {
        return Err(Error::ShapeMismatch {
            op: "finite_difference_hvp",
            lhs: vec![theta.len()],
            rhs: vec![direction.len()],
        });
    }
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(direction).map(|(t, d)| t + sign * eps * d).collect() };
    let plus = grad_fn(&shifted(1.0))?;
    let minus = grad_fn(&shifted(-1.0))?;
    Ok(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * eps)).collect())
}

/// GraSP: `−θ ⊙ Hg` with `g = ∇L` and a finite-difference `Hg`.
///
/// The step is `ε = fd_eps · ‖θ‖ / ‖g‖`. Scores may be negative; the
/// pruning driver keeps the lowest ones.
pub fn grasp_saliency(net: &Network, batches: &[Batch], fd_eps: f64) -> Result<SaliencyScores> {
    if !(fd_eps > 0.0) {
        return Err(Error::InvalidArgument(format!("GraSP step must be positive, got {fd_eps}")));
    }
    let theta = net.masked_params();
    let g0 = summed_grad(net, &theta, batches)?;
    let g_norm = g0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if g_norm == 0.0 || !g_norm.is_finite() {
        return Err(Error::DegenerateGradient(format!("GraSP gradient norm is {g_norm}")));
    }
    let theta_norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let eps = fd_eps * theta_norm.max(f64::MIN_POSITIVE) / g_norm;
    let hg = finite_difference_hvp(|w| summed_grad(net, w, batches), &theta, &g0, eps)?;
    Ok(SaliencyScores::plain(theta.iter().zip(&hg).map(|(t, h)| -t * h).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaticKind {
    Magnitude,
    Random,
}

/// Magnitude `|θ|` or i.i.d. `U(0, 1)` scores.
pub fn static_saliency(net: &Network, kind: StaticKind, rng: &mut Rng) -> SaliencyScores {
    SaliencyScores::plain(match kind {
        StaticKind::Magnitude => net.params().iter().map(|t| t.abs()).collect(),
        StaticKind::Random => (0..net.num_params()).map(|_| rng.uniform()).collect(),
    })
}
