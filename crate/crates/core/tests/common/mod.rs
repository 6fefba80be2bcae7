#![allow(dead_code)]

use pxlab::{LayerSpec, Network, Rng, Tensor};

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Relative error with both-zero counted as exact.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn pick(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

#[derive(Debug, Clone, Copy)]
pub struct MlpShape {
    pub max_depth: usize,
    pub max_width: usize,
    pub max_outputs: usize,
    pub max_batch: usize,
}

/// A random ReLU MLP with N(0,1) weights, random biases on some layers, and
/// an optional random mask, plus a random input batch.
pub fn random_mlp(rng: &mut Rng, shape: MlpShape, masked: bool) -> (Network, Tensor) {
    let depth = pick(rng, 1, shape.max_depth);
    let d = pick(rng, 1, shape.max_width);
    let k = pick(rng, 1, shape.max_outputs);
    let mut layers = Vec::new();
    let mut fan = d;
    for l in 0..depth {
        let out = if l + 1 == depth { k } else { pick(rng, 1, shape.max_width) };
        let bias = rng.uniform() < 0.5;
        layers.push(if bias { LayerSpec::dense_bias(fan, out) } else { LayerSpec::dense(fan, out) });
        if l + 1 < depth {
            layers.push(LayerSpec::ReLU);
        }
        fan = out;
    }
    let probe = Network::build(&[d], layers.clone(), rng).unwrap();
    let params = rng.normal(&[probe.num_params()], 0.0, 1.0).unwrap().into_data();
    let mut net = Network::from_params(&[d], layers, params).unwrap();
    if masked && rng.uniform() < 0.5 {
        let mask: Vec<f64> = (0..net.num_params()).map(|_| f64::from(rng.uniform() < 0.8)).collect();
        net.set_mask(&mask).unwrap();
    }
    let n = pick(rng, 1, shape.max_batch);
    let x = rng.normal(&[n, d], 0.0, 1.0).unwrap();
    (net, x)
}

/// A random small conv net: conv, ReLU, optional average pooling, flatten, dense.
pub fn random_convnet(rng: &mut Rng) -> (Network, Tensor) {
    let c = pick(rng, 1, 2);
    let side = 2 * pick(rng, 2, 3);
    let ch = pick(rng, 1, 3);
    let k = pick(rng, 1, 3);
    let pad = if k == 3 { 1 } else { 0 };
    let classes = pick(rng, 1, 3);
    let mut layers = vec![
        LayerSpec::Conv2D { in_ch: c, out_ch: ch, kh: k, kw: k, stride: 1, padding: pad, bias: rng.uniform() < 0.5 },
        LayerSpec::ReLU,
    ];
    let mut out_side = side + 2 * pad - k + 1;
    if out_side.is_multiple_of(2) {
        layers.push(LayerSpec::AvgPool { k: 2, stride: 2 });
        out_side /= 2;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::dense_bias(ch * out_side * out_side, classes));
    let probe = Network::build(&[c, side, side], layers.clone(), rng).unwrap();
    let params = rng.normal(&[probe.num_params()], 0.0, 1.0).unwrap().into_data();
    let net = Network::from_params(&[c, side, side], layers, params).unwrap();
    let n = pick(rng, 1, 3);
    let x = rng.normal(&[n, c, side, side], 0.0, 1.0).unwrap();
    (net, x)
}

/// The 3-4-4-2 ReLU MLP fixture with seeded weights and a 3-example batch.
pub fn fixture_3442() -> (Network, Tensor) {
    let layers = vec![
        LayerSpec::dense(3, 4),
        LayerSpec::ReLU,
        LayerSpec::dense(4, 4),
        LayerSpec::ReLU,
        LayerSpec::dense(4, 2),
    ];
    let mut rng = Rng::new(3442);
    let params = rng.normal(&[3 * 4 + 4 * 4 + 4 * 2], 0.0, 1.0).unwrap().into_data();
    let net = Network::from_params(&[3], layers, params).unwrap();
    let x = rng.normal(&[3, 3], 0.0, 1.0).unwrap();
    (net, x)
}

pub fn fixture_221() -> (Network, Tensor) {
    let net = Network::from_params(
        &[2],
        vec![LayerSpec::dense(2, 2), LayerSpec::ReLU, LayerSpec::dense(2, 1)],
        vec![1.0, -1.0, 0.5, 2.0, 1.0, 1.0],
    )
    .unwrap();
    (net, Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap())
}

/// A chain of 1-wide dense layers, one per weight, with ReLUs in between.
pub fn chain(weights: &[f64]) -> Network {
    let mut layers = Vec::new();
    for i in 0..weights.len() {
        layers.push(LayerSpec::dense(1, 1));
        if i + 1 < weights.len() {
            layers.push(LayerSpec::ReLU);
        }
    }
    Network::from_params(&[1], layers, weights.to_vec()).unwrap()
}
