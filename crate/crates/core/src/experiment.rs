//! Config-driven experiment runners producing CSV tables.
//!
//! Every runner evaluates independent `(method, sparsity, seed)` cells,
//! possibly on several worker threads, and assembles rows in configuration
//! order so the output does not depend on scheduling.

use crate::data::{gen_blobs, gen_spirals, load_idx, pruning_subset, Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{convnet4_specs, mlp6_specs, Checkpoint, LayerSpec, Network};
use crate::ntk::{eigenspectrum, jacobian, ntk_from_jacobian};
use crate::pruning::{density_over, export_mask_text, imp, prunable_positions, prune, Method, PruneConfig};
use crate::tensor::{Rng, Tensor};
use crate::train::{train, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Environment variable holding the number of worker slots.
pub const WORKERS_ENV: &str = "PXLAB_WORKERS";

/// Three trivial, three mild and three extreme sparsity percentages.
pub const DEFAULT_SPARSITIES: [f64; 9] = [36.00, 59.04, 73.80, 83.22, 89.30, 93.12, 95.60, 97.17, 98.20];

pub const DEFAULT_ROUNDS_GRID: [usize; 4] = [1, 2, 10, 100];

const TEST_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp6,
    Convnet4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Spirals {
        n_per_class: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    Blobs {
        n_per_class: usize,
        classes: usize,
        dim: usize,
        spread: f64,
        #[serde(default)]
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Gaussian blobs over `side × side` pixels presented as one-channel images.
    BlobImages {
        n_per_class: usize,
        classes: usize,
        side: usize,
        spread: f64,
        #[serde(default)]
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
}

impl DatasetSpec {
    /// Training set and optional held-out set.
    pub fn load(&self) -> Result<(Dataset, Option<Dataset>)> {
        let test_seed = |s: u64| s.wrapping_add(TEST_SEED_OFFSET);
        Ok(match self {
            DatasetSpec::Spirals { n_per_class, noise, test_per_class, seed } => (
                gen_spirals(*seed, *n_per_class, *noise)?,
                (*test_per_class > 0)
                    .then(|| gen_spirals(test_seed(*seed), *test_per_class, *noise))
                    .transpose()?,
            ),
            DatasetSpec::Blobs { n_per_class, classes, dim, spread, test_per_class, seed } => {
                let (train, test) = blob_pair(*seed, *n_per_class, *test_per_class, *classes, *dim, *spread)?;
                (train, test)
            }
            DatasetSpec::BlobImages { n_per_class, classes, side, spread, test_per_class, seed } => {
                let (train, test) = blob_pair(*seed, *n_per_class, *test_per_class, *classes, side * side, *spread)?;
                let shape = [1, *side, *side];
                (
                    train.reshape_examples(&shape)?,
                    test.map(|t| t.reshape_examples(&shape)).transpose()?,
                )
            }
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
                let train = load_idx(train_images, train_labels)?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l)?),
                    (None, None) => None,
                    _ => return Err(Error::Config("idx test set needs both test_images and test_labels".into())),
                };
                (train, test)
            }
        })
    }
}

fn blob_pair(seed: u64, n: usize, n_test: usize, k: usize, d: usize, spread: f64) -> Result<(Dataset, Option<Dataset>)> {
    // Train and test share the cluster centers, so they are drawn together and split per class.
    let all = gen_blobs(seed, n + n_test, k, d, spread)?;
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..k {
        let start = c * (n + n_test);
        train_idx.extend(start..start + n);
        test_idx.extend(start + n..start + n + n_test);
    }
    let pick = |idx: &[usize]| -> Result<Dataset> {
        let b = all.batch(idx)?;
        Dataset::new(b.x, b.y, k)
    };
    Ok((pick(&train_idx)?, (n_test > 0).then(|| pick(&test_idx)).transpose()?))
}

fn default_width() -> usize {
    64
}
fn default_channels() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_sparsities() -> Vec<f64> {
    DEFAULT_SPARSITIES.to_vec()
}
fn default_rounds() -> usize {
    100
}
fn default_epc() -> usize {
    10
}
fn default_batch() -> usize {
    128
}
fn default_probe() -> usize {
    8
}
fn default_rounds_grid() -> Vec<usize> {
    DEFAULT_ROUNDS_GRID.to_vec()
}
fn default_imp_rounds() -> usize {
    3
}
fn default_grasp_eps() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    /// Hidden width of MLP-6.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Base channel count of ConvNet-4.
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    #[serde(default = "default_sparsities")]
    pub sparsities: Vec<f64>,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_epc")]
    pub examples_per_class: usize,
    #[serde(default = "default_batch")]
    pub pruning_batch_size: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Examples of the pruning set used for the NTK; 0 disables NTK columns.
    #[serde(default = "default_probe")]
    pub ntk_probe: usize,
    #[serde(default = "default_rounds_grid")]
    pub rounds_grid: Vec<usize>,
    #[serde(default = "default_imp_rounds")]
    pub imp_rounds: usize,
    #[serde(default = "default_grasp_eps")]
    pub grasp_eps: f64,
    #[serde(default = "default_true")]
    pub overflow_guard: bool,
    #[serde(default)]
    pub prune_biases: bool,
    /// Writes each pruned mask and initial checkpoint under `<out>/masks`.
    #[serde(default)]
    pub save_masks: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.methods.is_empty() {
            return bad("field `methods`: at least one method is required".into());
        }
        if self.seeds.is_empty() {
            return bad("field `seeds`: at least one seed is required".into());
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                return bad(format!("field `seeds`: duplicate seed {s}"));
            }
        }
        if self.sparsities.is_empty() {
            return bad("field `sparsities`: at least one sparsity is required".into());
        }
        if let Some(s) = self.sparsities.iter().find(|s| !(**s > 0.0 && **s < 100.0)) {
            return bad(format!("field `sparsities`: {s} is outside (0, 100)"));
        }
        if self.rounds == 0 || self.rounds_grid.contains(&0) || self.imp_rounds == 0 {
            return bad("round counts must be positive".into());
        }
        if self.examples_per_class == 0 || self.pruning_batch_size == 0 {
            return bad("fields `examples_per_class` and `pruning_batch_size` must be positive".into());
        }
        if self.width == 0 || self.channels == 0 {
            return bad("fields `width` and `channels` must be positive".into());
        }
        self.train.validate().map_err(|e| Error::Config(format!("field `train`: {e}")))
    }
}

/// Loaded data shared by all cells of one experiment.
pub struct Prepared {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub pruning_set: Vec<Batch>,
    pub probe: Option<Tensor>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (mut train, mut test) = cfg.dataset.load()?;
    if cfg.architecture == Architecture::Mlp6 && train.example_shape().len() > 1 {
        let d = train.example_shape().iter().product::<usize>();
        train = train.reshape_examples(&[d])?;
        test = test.map(|t| t.reshape_examples(&[d])).transpose()?;
    }
    let pruning_set = pruning_subset(&train, cfg.examples_per_class, cfg.pruning_batch_size)?;
    let probe = (cfg.ntk_probe > 0).then(|| balanced_probe(&train, cfg.examples_per_class, cfg.ntk_probe)).transpose()?;
    Ok(Prepared { train, test, pruning_set, probe })
}

/// Up to `n` pruning-set examples taken round-robin over classes.
pub fn balanced_probe(train: &Dataset, examples_per_class: usize, n: usize) -> Result<Tensor> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes];
    for (i, &y) in train.y.iter().enumerate() {
        if by_class[y].len() < examples_per_class {
            by_class[y].push(i);
        }
    }
    let mut picked = Vec::with_capacity(n);
    'outer: for r in 0..examples_per_class {
        for members in &by_class {
            if picked.len() == n {
                break 'outer;
            }
            if let Some(&i) = members.get(r) {
                picked.push(i);
            }
        }
    }
    Ok(train.batch(&picked)?.x)
}

pub fn architecture_specs(cfg: &ExperimentConfig, example_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    match cfg.architecture {
        Architecture::Mlp6 => Ok(mlp6_specs(example_shape.iter().product(), classes, cfg.width, cfg.bias)),
        Architecture::Convnet4 => match example_shape {
            &[c, h, w] => Ok(convnet4_specs([c, h, w], classes, cfg.channels)),
            other => Err(Error::Config(format!("convnet4 needs image data [C, H, W], got example shape {other:?}"))),
        },
    }
}

pub fn build_network(cfg: &ExperimentConfig, data: &Prepared, seed: u64) -> Result<Network> {
    let shape = data.train.example_shape().to_vec();
    let specs = architecture_specs(cfg, &shape, data.train.num_classes)?;
    Network::build(&shape, specs, &mut Rng::new(seed))
}

fn prune_config(cfg: &ExperimentConfig, method: Method, density: f64, rounds: usize, seed: u64) -> PruneConfig {
    PruneConfig {
        method,
        density,
        rounds,
        examples_per_class: cfg.examples_per_class,
        batch_size: cfg.pruning_batch_size,
        seed,
        grasp_eps: cfg.grasp_eps,
        overflow_guard: cfg.overflow_guard,
        prune_biases: cfg.prune_biases,
    }
}

pub fn density_of(sparsity_pct: f64) -> f64 {
    1.0 - sparsity_pct / 100.0
}

/// Computes the final mask of one method at one density; IMP trains as part of pruning.
pub fn compute_mask(cfg: &ExperimentConfig, data: &Prepared, net: &Network, method: Method, density: f64, rounds: usize, seed: u64) -> Result<Vec<f64>> {
    if method == Method::IMP {
        let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
        let per_round = density.powf(1.0 / cfg.imp_rounds as f64);
        return imp(net, &data.train, &train_cfg, cfg.imp_rounds, per_round);
    }
    prune(net, &prune_config(cfg, method, density, rounds, seed), &data.pruning_set)
}

pub fn ntk_trace(net: &Network, probe: &Tensor) -> Result<f64> {
    Ok(ntk_from_jacobian(&jacobian(net, probe)?)?.trace)
}

/// Number of worker slots from [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates `f(0..n)` on the worker pool, returning results in index order.
pub fn run_cells<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(worker_count()).build() {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    (0..n).map(f).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub method: Method,
    pub sparsity_pct: f64,
    pub rounds: usize,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    /// Kept fraction of the prunable parameters.
    pub density: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub connectivity: bool,
    pub trace_dense: Option<f64>,
    pub trace_pruned: Option<f64>,
}

/// Prune, measure the NTK traces at initialization, train, evaluate.
pub fn run_cell(cfg: &ExperimentConfig, data: &Prepared, method: Method, sparsity_pct: f64, rounds: usize, seed: u64, out: Option<&Path>) -> Result<CellMetrics> {
    let net = build_network(cfg, data, seed)?;
    let mask = compute_mask(cfg, data, &net, method, density_of(sparsity_pct), rounds, seed)?;
    let mut pruned = net.with_mask(&mask)?;
    if let Some(dir) = out.filter(|_| cfg.save_masks) {
        let dir = dir.join("masks");
        std::fs::create_dir_all(&dir)?;
        let stem = format!("{}_{:.2}_t{}_s{}", method.name(), sparsity_pct, rounds, seed);
        std::fs::write(dir.join(format!("{stem}.mask")), export_mask_text(&mask))?;
        Checkpoint::save(&pruned, &dir.join(format!("{stem}.json")))?;
    }
    let (trace_dense, trace_pruned) = match &data.probe {
        Some(p) => (Some(ntk_trace(&net, p)?), Some(ntk_trace(&pruned, p)?)),
        None => (None, None),
    };
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let history = train(&mut pruned, &data.train, data.test.as_ref(), &train_cfg)?;
    Ok(CellMetrics {
        density: density_over(&mask, &prunable_positions(&net, cfg.prune_biases && method != Method::IMP)),
        train_acc: history.final_train_accuracy().unwrap_or(f64::NAN),
        test_acc: history.final_test_accuracy(),
        connectivity: pruned.check_connectivity(),
        trace_dense,
        trace_pruned,
    })
}

/// Rendered CSV plus the number of failed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub csv: String,
    pub failures: usize,
    pub cells: Vec<CellResult>,
}

impl Table {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, &self.csv)?;
        Ok(())
    }
}

fn opt(v: Option<f64>, prec: usize, sci: bool) -> String {
    match v {
        Some(x) if sci => format!("{x:.prec$e}"),
        Some(x) => format!("{x:.prec$}"),
        None => String::new(),
    }
}

fn status_field(e: &str) -> String {
    format!("error: {}", e.replace([',', '\n', '"'], ";"))
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

pub const SWEEP_HEADER: &str = "method,sparsity_pct,density,seed,final_train_acc,final_test_acc,connectivity,ntk_trace_dense,ntk_trace_pruned,status,train_acc_std,test_acc_std";

fn render_rows(cells: &[CellResult], group: usize, with_rounds: bool) -> String {
    let mut csv = String::new();
    let prefix = |c: &CellResult| {
        if with_rounds {
            format!("{},{:.2},{}", c.method, c.sparsity_pct, c.rounds)
        } else {
            format!("{},{:.2}", c.method, c.sparsity_pct)
        }
    };
    for chunk in cells.chunks(group) {
        let mut ok = Vec::new();
        for c in chunk {
            match &c.outcome {
                Ok(m) => {
                    ok.push(m);
                    let _ = writeln!(
                        csv,
                        "{},{:.6},{},{:.6},{},{},{},{},ok,,",
                        prefix(c),
                        m.density,
                        c.seed,
                        m.train_acc,
                        opt(m.test_acc, 6, false),
                        m.connectivity,
                        opt(m.trace_dense, 10, true),
                        opt(m.trace_pruned, 10, true),
                    );
                }
                Err(e) => {
                    let _ = writeln!(csv, "{},,{},,,,,,{},,", prefix(c), c.seed, status_field(e));
                }
            }
        }
        let failed = chunk.len() - ok.len();
        let avg = |f: &dyn Fn(&CellMetrics) -> Option<f64>| mean_std(&ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>());
        let density = avg(&|m| Some(m.density));
        let tr = avg(&|m| Some(m.train_acc));
        let te = avg(&|m| m.test_acc);
        let conn = avg(&|m| Some(if m.connectivity { 1.0 } else { 0.0 }));
        let td = avg(&|m| m.trace_dense);
        let tp = avg(&|m| m.trace_pruned);
        let status = if failed == 0 { "ok".to_string() } else { format!("partial: {failed} of {} failed", chunk.len()) };
        let _ = writeln!(
            csv,
            "{},{},summary,{},{},{},{},{},{},{},{}",
            prefix(&chunk[0]),
            opt(density.map(|d| d.0), 6, false),
            opt(tr.map(|d| d.0), 6, false),
            opt(te.map(|d| d.0), 6, false),
            opt(conn.map(|d| d.0), 6, false),
            opt(td.map(|d| d.0), 10, true),
            opt(tp.map(|d| d.0), 10, true),
            status,
            opt(tr.map(|d| d.1), 6, false),
            opt(te.map(|d| d.1), 6, false),
        );
    }
    csv
}

fn out_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> Option<PathBuf> {
    out.map(Path::to_path_buf).or_else(|| cfg.output_dir.clone())
}

/// Prune, train and evaluate every `(method, sparsity, seed)`.
pub fn run_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Table> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let dir = out_dir(cfg, out);
    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        for &s in &cfg.sparsities {
            for &seed in &cfg.seeds {
                jobs.push((method, s, seed));
            }
        }
    }
    let cells: Vec<CellResult> = run_cells(jobs.len(), |i| {
        let (method, sparsity_pct, seed) = jobs[i];
        let outcome = run_cell(cfg, &data, method, sparsity_pct, cfg.rounds, seed, dir.as_deref()).map_err(|e| e.to_string());
        CellResult { method, sparsity_pct, rounds: cfg.rounds, seed, outcome }
    });
    let csv = format!("{SWEEP_HEADER}\n{}", render_rows(&cells, cfg.seeds.len(), false));
    let failures = cells.iter().filter(|c| c.outcome.is_err()).count();
    Ok(Table { csv, failures, cells })
}

pub const ROUNDS_HEADER: &str = "method,sparsity_pct,rounds,density,seed,final_train_acc,final_test_acc,connectivity,ntk_trace_dense,ntk_trace_pruned,status,train_acc_std,test_acc_std";

/// Iterative methods at every `T` of the rounds grid; single-shot methods and IMP once.
pub fn run_rounds_ablation(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Table> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let dir = out_dir(cfg, out);
    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        let grid: Vec<usize> = if method.is_iterative() && method != Method::IMP {
            cfg.rounds_grid.clone()
        } else if method == Method::IMP {
            vec![cfg.imp_rounds]
        } else {
            vec![1]
        };
        for &t in &grid {
            for &s in &cfg.sparsities {
                for &seed in &cfg.seeds {
                    jobs.push((method, s, t, seed));
                }
            }
        }
    }
    let cells: Vec<CellResult> = run_cells(jobs.len(), |i| {
        let (method, sparsity_pct, rounds, seed) = jobs[i];
        let outcome = run_cell(cfg, &data, method, sparsity_pct, rounds, seed, dir.as_deref()).map_err(|e| e.to_string());
        CellResult { method, sparsity_pct, rounds, seed, outcome }
    });
    let csv = format!("{ROUNDS_HEADER}\n{}", render_rows(&cells, cfg.seeds.len(), true));
    let failures = cells.iter().filter(|c| c.outcome.is_err()).count();
    Ok(Table { csv, failures, cells })
}

pub const SPECTRUM_HEADER: &str = "method,sparsity,seed,eig_index,eigenvalue";

/// NTK eigenvalues on the probe set for the dense net and every pruned variant.
///
/// Dense rows use method `dense` and sparsity `0.00`. Failed variants are
/// counted and contribute no rows.
pub fn dump_spectrum(cfg: &ExperimentConfig) -> Result<(String, usize)> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let probe = data
        .probe
        .clone()
        .ok_or_else(|| Error::Config("field `ntk_probe`: spectrum needs a positive probe size".into()))?;
    let mut jobs: Vec<(Option<Method>, f64, u64)> = Vec::new();
    for &seed in &cfg.seeds {
        jobs.push((None, 0.0, seed));
        for &method in &cfg.methods {
            for &s in &cfg.sparsities {
                jobs.push((Some(method), s, seed));
            }
        }
    }
    let results: Vec<Result<Vec<f64>>> = run_cells(jobs.len(), |i| {
        let (method, s, seed) = jobs[i];
        let net = build_network(cfg, &data, seed)?;
        let net = match method {
            Some(m) => net.with_mask(&compute_mask(cfg, &data, &net, m, density_of(s), cfg.rounds, seed)?)?,
            None => net,
        };
        eigenspectrum(&ntk_from_jacobian(&jacobian(&net, &probe)?)?.kernel)
    });
    let mut csv = format!("{SPECTRUM_HEADER}\n");
    let mut failures = 0;
    for ((method, s, seed), r) in jobs.iter().zip(results) {
        let name = method.map_or("dense", Method::name);
        match r {
            Ok(eigs) => {
                for (i, e) in eigs.iter().enumerate() {
                    let _ = writeln!(csv, "{name},{s:.2},{seed},{i},{e:.17e}");
                }
            }
            Err(Error::CapExceeded { what, needed, cap }) => return Err(Error::CapExceeded { what, needed, cap }),
            Err(_) => failures += 1,
        }
    }
    Ok((csv, failures))
}

pub const WIDTHS_HEADER: &str = "method,sparsity_pct,layer_index,layer_name,active_units,total_units";

/// Active output units per layer at the first configured seed; dense rows first.
pub fn dump_layer_widths(cfg: &ExperimentConfig) -> Result<(String, usize)> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let seed = cfg.seeds[0];
    let mut jobs: Vec<(Option<Method>, f64)> = vec![(None, 0.0)];
    for &method in &cfg.methods {
        for &s in &cfg.sparsities {
            jobs.push((Some(method), s));
        }
    }
    let results: Vec<Result<Network>> = run_cells(jobs.len(), |i| {
        let (method, s) = jobs[i];
        let net = build_network(cfg, &data, seed)?;
        match method {
            Some(m) => net.with_mask(&compute_mask(cfg, &data, &net, m, density_of(s), cfg.rounds, seed)?),
            None => Ok(net),
        }
    });
    let mut csv = format!("{WIDTHS_HEADER}\n");
    let mut failures = 0;
    for ((method, s), r) in jobs.iter().zip(results) {
        let name = method.map_or("dense", Method::name);
        match r {
            Ok(net) => {
                for w in net.active_output_units() {
                    let _ = writeln!(
                        csv,
                        "{name},{s:.2},{},{},{},{}",
                        w.layer_index, w.layer_name, w.active_units, w.total_units
                    );
                }
            }
            Err(_) => failures += 1,
        }
    }
    Ok((csv, failures))
}
