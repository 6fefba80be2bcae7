//! Masked SGD training and evaluation.

use crate::autodiff::{forward, forward_with, ActivationMode, ForwardConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(epoch, factor)`: from that epoch on the learning rate is multiplied by `factor`.
    pub lr_drops: Vec<(usize, f64)>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 32,
            lr_drops: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        for (i, &(epoch, factor)) in self.lr_drops.iter().enumerate() {
            if !(factor > 0.0) {
                return bad(format!("lr drop factor must be positive, got {factor}"));
            }
            if i > 0 && epoch <= self.lr_drops[i - 1].0 {
                return bad("lr drop epochs must be strictly increasing".into());
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidLabel { label, classes: k });
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            grad[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Loss and parameter gradient of the mean cross-entropy at `weights ⊙ M`.
pub fn loss_and_grad(net: &Network, weights: &[f64], x: &Tensor, y: &[usize]) -> Result<(f64, Vec<f64>)> {
    let pass = forward_with(net, weights, x, ForwardConfig::standard())?;
    let (loss, grad_logits) = cross_entropy(&pass.output, y)?;
    Ok((loss, pass.backward(&grad_logits)?))
}

/// One momentum step `v ← μv + g + λθ; θ ← θ − αv` on unmasked positions.
pub fn sgd_step(net: &mut Network, grads: &[f64], cfg: &TrainConfig, lr: f64, velocity: &mut [f64]) -> Result<()> {
    let m = net.num_params();
    if grads.len() != m || velocity.len() != m {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![m],
            rhs: vec![grads.len(), velocity.len()],
        });
    }
    let mask = net.mask().to_vec();
    let mut theta = net.params().to_vec();
    for j in 0..m {
        if mask[j] == 0.0 {
            theta[j] = 0.0;
            velocity[j] = 0.0;
            continue;
        }
        velocity[j] = cfg.momentum * velocity[j] + grads[j] + cfg.weight_decay * theta[j];
        theta[j] -= lr * velocity[j];
    }
    net.set_params(&theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    fn last_of(&self, split: Split) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }

    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.last_of(Split::Train).map(|r| r.accuracy)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.last_of(Split::Test).map(|r| r.accuracy)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.last_of(Split::Train).map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{:.10},{:.6}", r.epoch, r.split.as_str(), r.loss, r.accuracy);
        }
        out
    }
}

/// Mean loss and accuracy of `net` (with its mask) over `ds`.
pub fn evaluate_loss(net: &Network, ds: &Dataset) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = ds.batch(chunk)?;
        let out = forward(net, &batch.x, ActivationMode::Standard)?.output;
        let (l, _) = cross_entropy(&out, &batch.y)?;
        loss += l * chunk.len() as f64;
        correct += count_correct(&out, &batch.y);
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Top-1 accuracy; ties in the logits go to the lowest class index.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<f64> {
    Ok(evaluate_loss(net, ds)?.1)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Trains `net` in place under its current mask. Masked parameters are zeroed first and stay zero.
pub fn train(net: &mut Network, train_set: &Dataset, test_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    let zeroed = net.masked_params();
    net.set_params(&zeroed)?;
    let mut rng = Rng::new(cfg.seed);
    let mut velocity = vec![0.0; net.num_params()];
    let mut history = History::default();
    let log = |net: &Network, epoch: usize, history: &mut History| -> Result<()> {
        let (loss, accuracy) = evaluate_loss(net, train_set)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        history.records.push(EpochRecord { epoch, split: Split::Train, loss, accuracy });
        if let Some(test) = test_set {
            let (loss, accuracy) = evaluate_loss(net, test)?;
            history.records.push(EpochRecord { epoch, split: Split::Test, loss, accuracy });
        }
        Ok(())
    };
    log(net, 0, &mut history)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk)?;
            let (loss, grads) = match loss_and_grad(net, net.params(), &batch.x, &batch.y) {
                Err(Error::NonFinite(_) | Error::NonFiniteLayer { .. }) => return Err(Error::NonFiniteLoss(epoch)),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss(epoch));
            }
            match sgd_step(net, &grads, cfg, lr, &mut velocity) {
                Err(Error::NonFinite(_)) => return Err(Error::NonFiniteLoss(epoch)),
                other => other?,
            }
        }
        log(net, epoch, &mut history)?;
    }
    Ok(history)
}
