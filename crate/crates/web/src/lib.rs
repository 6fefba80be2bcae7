//! Browser bindings: prune a spirals MLP, compare NTK spectra and check the
//! trace bound. Every entry point takes and returns JSON text.

use pxlab::experiment::{build_network, compute_mask, density_of, prepare, ExperimentConfig};
use pxlab::ntk::{eigenspectrum, jacobian, ntk_from_jacobian};
use pxlab::paths::verify_bound;
use pxlab::pruning::{density_over, prunable_positions, Method};
use pxlab::{LayerSpec, Network, Rng};
use serde::Deserialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct PruneRequest {
    pub method: Method,
    pub sparsity_pct: f64,
    pub rounds: usize,
    pub width: usize,
    pub seed: u64,
    pub probe: usize,
}

impl Default for PruneRequest {
    fn default() -> Self {
        PruneRequest { method: Method::PX, sparsity_pct: 98.2, rounds: 20, width: 16, seed: 0, probe: 8 }
    }
}

fn config(req: &PruneRequest) -> Result<ExperimentConfig, String> {
    let cfg = json!({
        "architecture": "mlp6",
        "width": req.width,
        "dataset": {"kind": "spirals", "n_per_class": 100, "noise": 0.02, "test_per_class": 0},
        "methods": [req.method],
        "sparsities": [req.sparsity_pct],
        "rounds": req.rounds,
        "seeds": [req.seed],
        "ntk_probe": req.probe,
    });
    ExperimentConfig::from_json(&cfg.to_string()).map_err(|e| e.to_string())
}

fn parse<T: for<'de> Deserialize<'de> + Default>(text: &str) -> Result<T, String> {
    if text.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(text).map_err(|e| e.to_string())
}

fn pruned(req: &PruneRequest) -> Result<(Network, Network, pxlab::experiment::Prepared), String> {
    let cfg = config(req)?;
    let data = prepare(&cfg).map_err(|e| e.to_string())?;
    let net = build_network(&cfg, &data, req.seed).map_err(|e| e.to_string())?;
    let mask = compute_mask(&cfg, &data, &net, req.method, density_of(req.sparsity_pct), cfg.rounds, req.seed)
        .map_err(|e| e.to_string())?;
    let sparse = net.with_mask(&mask).map_err(|e| e.to_string())?;
    Ok((net, sparse, data))
}

/// Per-layer active output units and connectivity after pruning.
pub fn prune_widths(request: &str) -> Result<String, String> {
    let req: PruneRequest = parse(request)?;
    let (_, sparse, _) = pruned(&req)?;
    let layers: Vec<Value> = sparse
        .active_output_units()
        .into_iter()
        .map(|w| json!({"index": w.layer_index, "name": w.layer_name, "active": w.active_units, "total": w.total_units}))
        .collect();
    Ok(json!({
        "method": req.method.name(),
        "density": density_over(sparse.mask(), &prunable_positions(&sparse, false)),
        "connected": sparse.check_connectivity(),
        "layers": layers,
    })
    .to_string())
}

/// NTK eigenvalues on a balanced probe, dense and pruned.
pub fn spectrum(request: &str) -> Result<String, String> {
    let req: PruneRequest = parse(request)?;
    let (dense, sparse, data) = pruned(&req)?;
    let probe = data.probe.ok_or("probe size must be positive")?;
    let eig = |net: &Network| -> Result<(Vec<f64>, f64), String> {
        let ntk = ntk_from_jacobian(&jacobian(net, &probe).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        Ok((eigenspectrum(&ntk.kernel).map_err(|e| e.to_string())?, ntk.trace))
    };
    let (d, dt) = eig(&dense)?;
    let (p, pt) = eig(&sparse)?;
    Ok(json!({
        "method": req.method.name(),
        "dense": d,
        "pruned": p,
        "trace_dense": dt,
        "trace_pruned": pt,
    })
    .to_string())
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct BoundRequest {
    pub widths: Vec<usize>,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BoundRequest {
    fn default() -> Self {
        BoundRequest { widths: vec![3, 4, 4, 2], batch: 3, seed: 0 }
    }
}

/// NTK trace and its path bound on a random bias-free ReLU MLP.
pub fn bound(request: &str) -> Result<String, String> {
    let req: BoundRequest = parse(request)?;
    if req.widths.len() < 2 || req.widths.contains(&0) || req.batch == 0 {
        return Err("need at least two positive widths and a positive batch".into());
    }
    let mut layers = Vec::new();
    for (i, pair) in req.widths.windows(2).enumerate() {
        if i > 0 {
            layers.push(LayerSpec::ReLU);
        }
        layers.push(LayerSpec::dense(pair[0], pair[1]));
    }
    let mut rng = Rng::new(req.seed);
    let net = Network::build(&[req.widths[0]], layers, &mut rng).map_err(|e| e.to_string())?;
    let x = rng.normal(&[req.batch, req.widths[0]], 0.0, 1.0).map_err(|e| e.to_string())?;
    let check = verify_bound(&net, &x).map_err(|e| e.to_string())?;
    Ok(json!({
        "trace": check.trace,
        "bound": check.bound,
        "holds": check.holds,
        "relative_slack": check.relative_slack(),
    })
    .to_string())
}

#[wasm_bindgen(js_name = pruneWidths)]
pub fn prune_widths_js(request: &str) -> Result<String, JsValue> {
    prune_widths(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = ntkSpectrum)]
pub fn spectrum_js(request: &str) -> Result<String, JsValue> {
    spectrum(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = boundCheck)]
pub fn bound_js(request: &str) -> Result<String, JsValue> {
    bound(request).map_err(|e| JsValue::from_str(&e))
}
