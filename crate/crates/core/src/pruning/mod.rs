//! Saliency scores, the exponential density schedule, global masking and
//! the iterative pruning driver.

pub mod baselines;
pub mod px;

pub use baselines::{finite_difference_hvp, grasp_saliency, snip_saliency, static_saliency, StaticKind};
pub use px::{px_saliency, synflow_l2_saliency, synflow_saliency};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::{Rng, Tensor};
use crate::train::{train, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// One score per parameter, aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyScores {
    pub values: Vec<f64>,
    /// Natural log of the positive factor the overflow guard multiplied into `values`.
    pub log_scale: f64,
}

impl SaliencyScores {
    pub fn plain(values: Vec<f64>) -> Self {
        Self { values, log_scale: 0.0 }
    }

    /// Scores with the guard factor removed (may underflow for deep nets).
    pub fn unscaled(&self) -> Vec<f64> {
        let f = (-self.log_scale).exp();
        self.values.iter().map(|v| v * f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "px")]
    PX,
    #[serde(rename = "snip")]
    SNIP,
    #[serde(rename = "grasp")]
    GraSP,
    #[serde(rename = "synflow")]
    SynFlow,
    #[serde(rename = "synflow-l2")]
    SynFlowL2,
    #[serde(rename = "magnitude")]
    Magnitude,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "imp")]
    IMP,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::PX,
        Method::SNIP,
        Method::GraSP,
        Method::SynFlow,
        Method::SynFlowL2,
        Method::Magnitude,
        Method::Random,
        Method::IMP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::PX => "px",
            Method::SNIP => "snip",
            Method::GraSP => "grasp",
            Method::SynFlow => "synflow",
            Method::SynFlowL2 => "synflow-l2",
            Method::Magnitude => "magnitude",
            Method::Random => "random",
            Method::IMP => "imp",
        }
    }

    /// Methods whose schedule runs over `T` rounds; the others prune once.
    pub fn is_iterative(self) -> bool {
        matches!(self, Method::PX | Method::SynFlow | Method::SynFlowL2 | Method::IMP)
    }

    pub fn needs_data(self) -> bool {
        matches!(self, Method::PX | Method::SNIP | Method::GraSP)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key || (key == "synflowl2" && *m == Method::SynFlowL2))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pruning method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: Method,
    /// Final fraction of parameters kept, in `(0, 1]`.
    pub density: f64,
    pub rounds: usize,
    pub examples_per_class: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grasp_eps: f64,
    pub overflow_guard: bool,
    /// When false, bias entries keep mask 1 and are excluded from ranking and density.
    pub prune_biases: bool,
}

impl PruneConfig {
    pub fn new(method: Method, density: f64) -> Self {
        Self {
            method,
            density,
            rounds: 100,
            examples_per_class: 10,
            batch_size: 128,
            seed: 0,
            grasp_eps: 1e-3,
            overflow_guard: true,
            prune_biases: false,
        }
    }

    pub fn rounds(mut self, rounds: usize) -> Self {
        self.rounds = rounds;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidArgument(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if self.rounds == 0 || self.examples_per_class == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("rounds, examples per class and batch size must be positive".into()));
        }
        if !(self.grasp_eps > 0.0) {
            return Err(Error::InvalidArgument(format!("GraSP step must be positive, got {}", self.grasp_eps)));
        }
        Ok(())
    }

    /// Rounds actually run: single-shot methods always use one.
    pub fn effective_rounds(&self) -> usize {
        if self.method.is_iterative() {
            self.rounds
        } else {
            1
        }
    }
}

/// Fraction kept after round `t` of `rounds`: `k^(t/T)`.
pub fn schedule_density(k: f64, t: usize, rounds: usize) -> Result<f64> {
    if t == 0 || t > rounds {
        return Err(Error::RoundOutOfRange { t, rounds });
    }
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::InvalidArgument(format!("final density must lie in (0, 1], got {k}")));
    }
    if t == rounds {
        return Ok(k);
    }
    Ok(k.powf(t as f64 / rounds as f64))
}

/// `⌈keep · m⌉`, snapping to the nearest integer when within rounding noise.
pub fn keep_count(keep: f64, m: usize) -> usize {
    let x = keep * m as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Keeps the `⌈keep · m⌉` highest-scoring survivors of `prev_mask`, ties to the lower index.
pub fn global_topk_mask(scores: &[f64], keep: f64, prev_mask: &[f64]) -> Result<Vec<f64>> {
    let m = prev_mask.len();
    if scores.len() != m {
        return Err(Error::ShapeMismatch {
            op: "global_topk_mask",
            lhs: vec![m],
            rhs: vec![scores.len()],
        });
    }
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep fraction must lie in (0, 1], got {keep}")));
    }
    let mut survivors: Vec<usize> = (0..m).filter(|&j| prev_mask[j] != 0.0).collect();
    let wanted = keep_count(keep, m);
    if wanted > survivors.len() {
        return Err(Error::NotEnoughSurvivors {
            available: survivors.len(),
            requested: wanted,
        });
    }
    if survivors.iter().any(|&j| !scores[j].is_finite()) {
        return Err(Error::NonFinite("saliency scores"));
    }
    survivors.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![0.0; m];
    for &j in &survivors[..wanted] {
        mask[j] = 1.0;
    }
    Ok(mask)
}

/// Scores used for ranking under the current mask; larger means keep.
pub fn ranking_scores(net: &Network, cfg: &PruneConfig, set: &[Batch], rng: &mut Rng) -> Result<Vec<f64>> {
    let xs = || -> Vec<Tensor> { set.iter().map(|b| b.x.clone()).collect() };
    let scores = match cfg.method {
        Method::PX => px_saliency(net, &xs(), cfg.overflow_guard)?,
        Method::SynFlow => synflow_saliency(net, cfg.overflow_guard)?,
        Method::SynFlowL2 => synflow_l2_saliency(net, cfg.overflow_guard)?,
        Method::SNIP => snip_saliency(net, set)?,
        Method::GraSP => {
            let mut s = grasp_saliency(net, set, cfg.grasp_eps)?;
            s.values.iter_mut().for_each(|v| *v = -*v);
            s
        }
        Method::Magnitude => static_saliency(net, StaticKind::Magnitude, rng),
        Method::Random => static_saliency(net, StaticKind::Random, rng),
        Method::IMP => {
            return Err(Error::InvalidArgument("IMP alternates training and pruning; call imp()".into()));
        }
    };
    Ok(scores.values)
}

/// Flat indices that take part in ranking: all parameters, or all non-bias ones.
pub fn prunable_positions(net: &Network, prune_biases: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(net.num_params());
    for (_, block) in net.parametric_layers() {
        out.extend(block.range().filter(|&j| prune_biases || !block.is_bias(j)));
    }
    out
}

/// Fraction of `positions` left unmasked.
pub fn density_over(mask: &[f64], positions: &[usize]) -> f64 {
    let kept = positions.iter().filter(|&&j| mask[j] != 0.0).count();
    kept as f64 / positions.len().max(1) as f64
}

/// [`global_topk_mask`] restricted to `positions`; every other entry of the mask is left as is.
pub fn topk_over(scores: &[f64], keep: f64, prev_mask: &[f64], positions: &[usize]) -> Result<Vec<f64>> {
    let sub_scores: Vec<f64> = positions.iter().map(|&j| scores[j]).collect();
    let sub_prev: Vec<f64> = positions.iter().map(|&j| prev_mask[j]).collect();
    let sub = global_topk_mask(&sub_scores, keep, &sub_prev)?;
    let mut mask = prev_mask.to_vec();
    for (&j, v) in positions.iter().zip(sub) {
        mask[j] = v;
    }
    Ok(mask)
}

/// Runs the schedule and returns the final mask.
pub fn prune(net: &Network, cfg: &PruneConfig, pruning_set: &[Batch]) -> Result<Vec<f64>> {
    prune_observed(net, cfg, pruning_set, |_, _| {})
}

/// Like [`prune`], calling `observe(t, mask)` after each round.
pub fn prune_observed<F>(net: &Network, cfg: &PruneConfig, pruning_set: &[Batch], mut observe: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[f64]),
{
    cfg.validate()?;
    let rounds = cfg.effective_rounds();
    let mut rng = Rng::new(cfg.seed);
    let mut current = net.clone();
    let positions = prunable_positions(net, cfg.prune_biases);
    for t in 1..=rounds {
        let scores = ranking_scores(&current, cfg, pruning_set, &mut rng)?;
        let keep = schedule_density(cfg.density, t, rounds)?;
        let mask = topk_over(&scores, keep, current.mask(), &positions)?;
        current.set_mask(&mask)?;
        observe(t, &mask);
    }
    Ok(current.mask().to_vec())
}

/// Kept fraction formatted to four decimals.
pub fn format_density(mask: &[f64]) -> String {
    let kept = mask.iter().filter(|&&v| v != 0.0).count();
    format!("{:.4}", kept as f64 / mask.len().max(1) as f64)
}

/// Flat text mask: a `# density` comment line, then one `0` or `1` per parameter.
pub fn export_mask_text(mask: &[f64]) -> String {
    let mut out = format!("# density {}\n", format_density(mask));
    for &v in mask {
        out.push(if v != 0.0 { '1' } else { '0' });
        out.push('\n');
    }
    out
}

pub fn parse_mask_text(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| match l {
            "0" => Ok(0.0),
            "1" => Ok(1.0),
            other => Err(Error::InvalidArgument(format!("mask entries must be 0 or 1, got {other:?}"))),
        })
        .collect()
}

/// Iterative magnitude pruning with rewinding: train, keep the largest
/// `per_round_keep^r` fraction of trained weights, rewind survivors to `θ₀`.
/// Biases are never pruned.
pub fn imp(net: &Network, train_set: &Dataset, train_cfg: &TrainConfig, rounds: usize, per_round_keep: f64) -> Result<Vec<f64>> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("IMP needs at least one round".into()));
    }
    if !(per_round_keep > 0.0 && per_round_keep <= 1.0) {
        return Err(Error::InvalidArgument(format!("per-round keep must lie in (0, 1], got {per_round_keep}")));
    }
    let mut mask = net.mask().to_vec();
    let positions = prunable_positions(net, false);
    for r in 1..=rounds {
        let mut trained = net.with_mask(&mask)?;
        train(&mut trained, train_set, None, train_cfg)?;
        let magnitude: Vec<f64> = trained.params().iter().map(|t| t.abs()).collect();
        mask = topk_over(&magnitude, per_round_keep.powi(r as i32), &mask, &positions)?;
    }
    Ok(mask)
}
