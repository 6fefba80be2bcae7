//! Brute-force path enumeration for small MLPs.
//!
//! Everything here is computed directly from the path definitions, with its
//! own naive layer-wise evaluation for pre-activations, so it can certify the
//! forward-pass computations in [`crate::ntk`] and [`crate::pruning`].
//!
//! A path starts either at an input unit `s` or at the constant bias input
//! of some dense layer, takes one weight per subsequent dense layer, and ends
//! at an output unit `k`. Only "live" paths (every weight unmasked) enter the
//! sums, matching a network whose masked weights have been removed.

use crate::error::{Error, Result};
use crate::model::{BlockKind, LayerSpec, Network};
use crate::ntk;
use crate::tensor::Tensor;

pub const DEFAULT_PATH_CAP: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathStart {
    Input(usize),
    /// Constant-one input of the dense layer with this position among dense layers.
    Bias(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub start: PathStart,
    /// Flat parameter ids, one per traversed dense layer.
    pub weights: Vec<usize>,
    /// `(dense layer position, unit)` reached by each weight.
    pub units: Vec<(usize, usize)>,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

#[derive(Debug, Clone)]
struct DenseView {
    offset: usize,
    rows: usize,
    cols: usize,
    bias: bool,
    relu_after: bool,
}

impl DenseView {
    fn inputs(&self) -> usize {
        self.cols - usize::from(self.bias)
    }

    fn weight(&self, row: usize, col: usize) -> usize {
        self.offset + row * self.cols + col
    }
}

fn mlp_view(net: &Network) -> Result<Vec<DenseView>> {
    let mut views: Vec<DenseView> = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match (layer, &net.blocks()[i]) {
            (LayerSpec::Dense { .. }, Some(block)) => {
                let BlockKind::Dense { rows, cols, bias } = block.kind else { unreachable!() };
                views.push(DenseView {
                    offset: block.offset,
                    rows,
                    cols,
                    bias,
                    relu_after: false,
                });
            }
            (LayerSpec::ReLU, _) => match views.last_mut() {
                Some(v) => v.relu_after = true,
                None => return Err(Error::NotAnMlp(i)),
            },
            _ => return Err(Error::NotAnMlp(i)),
        }
    }
    Ok(views)
}

fn count_paths(views: &[DenseView]) -> usize {
    // paths reaching each unit of the current layer, accumulated layer by layer
    let mut per_unit: Vec<usize> = vec![1; views[0].inputs()];
    for v in views {
        let incoming: usize = per_unit.iter().sum::<usize>() + usize::from(v.bias);
        per_unit = vec![incoming; v.rows];
    }
    per_unit.iter().sum()
}

/// Enumerates every structurally valid path exactly once.
pub fn enumerate_paths(net: &Network) -> Result<PathSet> {
    enumerate_paths_capped(net, DEFAULT_PATH_CAP)
}

pub fn enumerate_paths_capped(net: &Network, cap: usize) -> Result<PathSet> {
    let views = mlp_view(net)?;
    let needed = count_paths(&views);
    if needed > cap {
        return Err(Error::CapExceeded {
            what: "path enumeration",
            needed,
            cap,
        });
    }
    let mut paths = Vec::with_capacity(needed);
    let mut weights = Vec::with_capacity(views.len());
    let mut units = Vec::with_capacity(views.len());

    fn extend(
        views: &[DenseView],
        layer: usize,
        src: usize,
        start: PathStart,
        weights: &mut Vec<usize>,
        units: &mut Vec<(usize, usize)>,
        out: &mut Vec<Path>,
    ) {
        let v = &views[layer];
        for row in 0..v.rows {
            weights.push(v.weight(row, src));
            units.push((layer, row));
            if layer + 1 == views.len() {
                out.push(Path {
                    start,
                    weights: weights.clone(),
                    units: units.clone(),
                    output: row,
                });
            } else {
                extend(views, layer + 1, row, start, weights, units, out);
            }
            weights.pop();
            units.pop();
        }
    }

    for s in 0..views[0].inputs() {
        extend(&views, 0, s, PathStart::Input(s), &mut weights, &mut units, &mut paths);
    }
    for (l, v) in views.iter().enumerate() {
        if v.bias {
            extend(&views, l, v.inputs(), PathStart::Bias(l), &mut weights, &mut units, &mut paths);
        }
    }
    Ok(PathSet { paths })
}

/// Product of the path's weights under `theta`.
pub fn path_value(path: &Path, theta: &[f64]) -> f64 {
    path.weights.iter().map(|&w| theta[w]).product()
}

/// Leave-one-out products `Π_{i∈p, i≠j} θ_i` for every `j` on the path.
fn leave_one_out(path: &Path, theta: &[f64]) -> Vec<f64> {
    (0..path.weights.len())
        .map(|skip| {
            path.weights
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != skip)
                .map(|(_, &w)| theta[w])
                .product()
        })
        .collect()
}

fn is_live(path: &Path, mask: &[f64]) -> bool {
    path.weights.iter().all(|&w| mask[w] != 0.0)
}

/// Pre-activations of every dense layer for one example, by plain loops at `θ ⊙ M`.
fn pre_activations(views: &[DenseView], theta: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let mut current = x.to_vec();
    let mut all = Vec::with_capacity(views.len());
    for v in views {
        let mut z = vec![0.0; v.rows];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, xc) in current.iter().enumerate() {
                acc += theta[v.weight(r, c)] * xc;
            }
            if v.bias {
                acc += theta[v.weight(r, v.inputs())];
            }
            *zr = acc;
        }
        current = if v.relu_after {
            z.iter().map(|&t| if t > 0.0 { t } else { 0.0 }).collect()
        } else {
            z.clone()
        };
        all.push(z);
    }
    all
}

struct Evaluated {
    views: Vec<DenseView>,
    theta: Vec<f64>,
    paths: PathSet,
}

impl Evaluated {
    fn new(net: &Network) -> Result<Self> {
        Ok(Self {
            views: mlp_view(net)?,
            theta: net.masked_params(),
            paths: enumerate_paths(net)?,
        })
    }

    fn activation(&self, path: &Path, z: &[Vec<f64>]) -> f64 {
        let open = path
            .units
            .iter()
            .all(|&(l, u)| !self.views[l].relu_after || z[l][u] > 0.0);
        if open {
            1.0
        } else {
            0.0
        }
    }

    fn source(path: &Path, x: &[f64]) -> f64 {
        match path.start {
            PathStart::Input(s) => x[s],
            PathStart::Bias(_) => 1.0,
        }
    }
}

fn examples(net: &Network, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let d: usize = net.input_shape().iter().product();
    if x.rank() != 2 || x.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "path oracle input",
            lhs: vec![0, d],
            rhs: x.shape().to_vec(),
        });
    }
    Ok(x.data().chunks(d).map(<[f64]>::to_vec).collect())
}

/// `a_p(x)`: product of the ReLU indicators of the units the path traverses.
pub fn path_activation(path: &Path, x: &[f64], net: &Network) -> Result<f64> {
    let views = mlp_view(net)?;
    let z = pre_activations(&views, &net.masked_params(), x);
    let open = path.units.iter().all(|&(l, u)| !views[l].relu_after || z[l][u] > 0.0);
    Ok(if open { 1.0 } else { 0.0 })
}

/// `f^k(x) = Σ_s Σ_{p ∈ P(s→k)} v_p a_p x_s` for each row of `x` (`[N, d]`), returned as `[N, K]`.
pub fn output_via_paths(net: &Network, x: &Tensor) -> Result<Tensor> {
    let ev = Evaluated::new(net)?;
    let k = net.output_dim();
    let rows = examples(net, x)?;
    let mut out = vec![0.0; rows.len() * k];
    for (n, xn) in rows.iter().enumerate() {
        let z = pre_activations(&ev.views, &ev.theta, xn);
        for p in &ev.paths.paths {
            out[n * k + p.output] += path_value(p, &ev.theta) * ev.activation(p, &z) * Evaluated::source(p, xn);
        }
    }
    Tensor::new(vec![rows.len(), k], out)
}

/// Per-output data term `G_k = Σ_n Σ_{p→k} a_p(x_n) x²_{n,s(p)}` over live paths.
pub fn data_term_per_output(net: &Network, x: &Tensor) -> Result<Vec<f64>> {
    let ev = Evaluated::new(net)?;
    let mask = net.mask();
    let mut g = vec![0.0; net.output_dim()];
    for xn in examples(net, x)? {
        let z = pre_activations(&ev.views, &ev.theta, &xn);
        for p in ev.paths.paths.iter().filter(|p| is_live(p, mask)) {
            g[p.output] += ev.activation(p, &z) * Evaluated::source(p, &xn).powi(2);
        }
    }
    Ok(g)
}

/// `‖J_v^f(X)‖²_F = Σ_n Σ_p a_p(x_n) x²_{n,s(p)}`.
pub fn frob_jvf(net: &Network, x: &Tensor) -> Result<f64> {
    Ok(data_term_per_output(net, x)?.iter().sum())
}

/// `‖J_θ^v‖²_F = Σ_p Σ_{j∈p} (Π_{i∈p, i≠j} θ_i)²`, leave-one-out, never dividing.
pub fn frob_jtv(net: &Network) -> Result<f64> {
    let ev = Evaluated::new(net)?;
    let mask = net.mask();
    Ok(ev
        .paths
        .paths
        .iter()
        .filter(|p| is_live(p, mask))
        .flat_map(|p| leave_one_out(p, &ev.theta))
        .map(|v| v * v)
        .sum())
}

/// Closed-form PX scores: `S_j = Σ_k G_k Σ_{p→k, j∈p} v_p(θ)²`.
pub fn px_scores(net: &Network, x: &Tensor) -> Result<Vec<f64>> {
    let g = data_term_per_output(net, x)?;
    let ev = Evaluated::new(net)?;
    let mut s = vec![0.0; net.num_params()];
    for p in ev.paths.paths.iter().filter(|p| is_live(p, net.mask())) {
        let v2 = path_value(p, &ev.theta).powi(2);
        for &w in &p.weights {
            s[w] += g[p.output] * v2;
        }
    }
    Ok(s)
}

/// `Σ_j ∂R/∂θ_j²` assembled from paths: `Σ_k G_k Σ_{p→k} Σ_{j∈p} (v_p/θ_j)²`.
pub fn px_gradient_total(net: &Network, x: &Tensor) -> Result<f64> {
    let g = data_term_per_output(net, x)?;
    let ev = Evaluated::new(net)?;
    Ok(ev
        .paths
        .paths
        .iter()
        .filter(|p| is_live(p, net.mask()))
        .map(|p| g[p.output] * leave_one_out(p, &ev.theta).iter().map(|v| v * v).sum::<f64>())
        .sum())
}

/// Closed-form SynFlow scores: `Σ_{j∈p} |v_p(θ)|`.
pub fn synflow_scores(net: &Network) -> Result<Vec<f64>> {
    path_weighted_scores(net, |v| v.abs())
}

/// Closed-form SynFlow-L2 scores: `Σ_{j∈p} v_p(θ)²`.
pub fn synflow_l2_scores(net: &Network) -> Result<Vec<f64>> {
    path_weighted_scores(net, |v| v * v)
}

fn path_weighted_scores(net: &Network, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let ev = Evaluated::new(net)?;
    let mut s = vec![0.0; net.num_params()];
    for p in &ev.paths.paths {
        let v = f(path_value(p, &ev.theta));
        for &w in &p.weights {
            s[w] += v;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub trace: f64,
    pub bound: f64,
    pub holds: bool,
}

impl BoundCheck {
    /// `(bound - trace) / max(bound, trace)`; nonnegative when the bound holds.
    pub fn relative_slack(&self) -> f64 {
        let scale = self.bound.abs().max(self.trace.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.bound - self.trace) / scale
        }
    }
}

/// Exact NTK trace against `‖J_v^f‖²_F · ‖J_θ^v‖²_F` from the path sums.
pub fn verify_bound(net: &Network, x: &Tensor) -> Result<BoundCheck> {
    let jac = ntk::jacobian(net, x)?;
    let trace = ntk::ntk_from_jacobian(&jac)?.trace;
    let bound = frob_jvf(net, x)? * frob_jtv(net)?;
    Ok(BoundCheck {
        trace,
        bound,
        holds: trace <= bound * (1.0 + 1e-8),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{forward, ActivationMode};
    use crate::model::LayerSpec;

    fn chain(w1: f64, w2: f64) -> Network {
        Network::from_params(
            &[1],
            vec![LayerSpec::dense(1, 1), LayerSpec::ReLU, LayerSpec::dense(1, 1)],
            vec![w1, w2],
        )
        .unwrap()
    }

    fn fixture_221() -> Network {
        Network::from_params(
            &[2],
            vec![LayerSpec::dense(2, 2), LayerSpec::ReLU, LayerSpec::dense(2, 1)],
            vec![1.0, -1.0, 0.5, 2.0, 1.0, 1.0],
        )
        .unwrap()
    }

    fn mlp(widths: &[usize]) -> Network {
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(LayerSpec::dense(w[0], w[1]));
            layers.push(LayerSpec::ReLU);
        }
        layers.pop();
        Network::build(&[widths[0]], layers, &mut crate::Rng::new(0)).unwrap()
    }

    #[test]
    fn path_counts() {
        assert_eq!(enumerate_paths(&mlp(&[2, 1])).unwrap().len(), 2);
        assert_eq!(enumerate_paths(&mlp(&[2, 2, 1])).unwrap().len(), 4);
        assert_eq!(enumerate_paths(&mlp(&[3, 4, 4, 2])).unwrap().len(), 96);
        let err = enumerate_paths_capped(&mlp(&[3, 4, 4, 2]), 50).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { needed: 96, .. }));
    }

    #[test]
    fn paths_are_structurally_valid() {
        let net = mlp(&[3, 4, 4, 2]);
        let set = enumerate_paths(&net).unwrap();
        let mut seen = std::collections::HashSet::new();
        for p in &set.paths {
            assert_eq!(p.weights.len(), 3);
            assert!(seen.insert(p.weights.clone()));
            // consecutive weights share a unit: W_{l+1}[next][prev] where prev is the unit reached by W_l
            let layers: Vec<_> = net.parametric_layers().map(|(_, b)| b.clone()).collect();
            for l in 0..2 {
                let (_, unit) = p.units[l];
                let BlockKind::Dense { cols, .. } = layers[l + 1].kind else { panic!() };
                assert_eq!((p.weights[l + 1] - layers[l + 1].offset) % cols, unit);
            }
        }
    }

    #[test]
    fn bias_paths_are_enumerated() {
        let net = Network::build(
            &[2],
            vec![LayerSpec::dense_bias(2, 3), LayerSpec::ReLU, LayerSpec::dense_bias(3, 1)],
            &mut crate::Rng::new(1),
        )
        .unwrap();
        // inputs: 2*3*1, bias of layer 0: 3*1, bias of layer 1: 1
        assert_eq!(enumerate_paths(&net).unwrap().len(), 6 + 3 + 1);
    }

    #[test]
    fn conv_is_rejected() {
        let net = Network::build(
            &[1, 4, 4],
            vec![LayerSpec::conv(1, 1, 3, 0), LayerSpec::Flatten, LayerSpec::dense(4, 1)],
            &mut crate::Rng::new(0),
        )
        .unwrap();
        assert_eq!(enumerate_paths(&net).unwrap_err(), Error::NotAnMlp(0));
    }

    #[test]
    fn path_value_cases() {
        let p = Path {
            start: PathStart::Input(0),
            weights: vec![0, 1],
            units: vec![(0, 0), (1, 0)],
            output: 0,
        };
        assert_eq!(path_value(&p, &[2.0, 3.0]), 6.0);
        assert_eq!(path_value(&p, &[2.0, 0.0]), 0.0);
        assert_eq!(path_value(&p, &[4.0, 9.0]), path_value(&p, &[2.0, 3.0]).powi(2));
    }

    #[test]
    fn chain_fixture_values() {
        let net = chain(2.0, 3.0);
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let neg = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let set = enumerate_paths(&net).unwrap();
        assert_eq!(path_activation(&set.paths[0], &[1.0], &net).unwrap(), 1.0);
        assert_eq!(path_activation(&set.paths[0], &[-1.0], &net).unwrap(), 0.0);
        assert_eq!(output_via_paths(&net, &one).unwrap().data(), &[6.0]);
        assert_eq!(output_via_paths(&net, &neg).unwrap().data(), &[0.0]);
        assert_eq!(frob_jvf(&net, &one).unwrap(), 1.0);
        assert_eq!(frob_jvf(&net, &Tensor::zeros(&[3, 1])).unwrap(), 0.0);
        assert_eq!(frob_jtv(&net).unwrap(), 13.0);
        assert_eq!(frob_jtv(&chain(2.0, 0.0)).unwrap(), 4.0);
    }

    #[test]
    fn chain_bound_is_tight() {
        let net = chain(2.0, 3.0);
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let check = verify_bound(&net, &one).unwrap();
        assert!((check.trace - 13.0).abs() < 1e-12);
        assert!((check.bound - 13.0).abs() < 1e-12);
        assert!(check.holds);
        let neg = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let check = verify_bound(&net, &neg).unwrap();
        assert_eq!((check.trace, check.bound), (0.0, 0.0));
        assert!(check.holds);
    }

    #[test]
    fn activation_matches_autodiff_record() {
        let net = fixture_221();
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let record = forward(&net, &x, ActivationMode::Standard).unwrap().record;
        // hidden unit 0 has pre-activation exactly 0 and is closed
        assert_eq!(record.sites[0].data(), &[0.0, 1.0]);
        for p in &enumerate_paths(&net).unwrap().paths {
            let hidden = p.units[0].1;
            assert_eq!(path_activation(p, &[1.0, 1.0], &net).unwrap(), record.sites[0].data()[hidden]);
        }
    }

    #[test]
    fn masked_weights_remove_paths() {
        let mut net = fixture_221();
        net.set_mask(&[1.0, 1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        // only paths through hidden unit 0 survive, which is closed on this input
        assert_eq!(frob_jvf(&net, &x).unwrap(), 0.0);
        // jtv: paths s→h0→out with weights (1, 1) and (-1, 1)
        assert_eq!(frob_jtv(&net).unwrap(), (1.0 + 1.0) + (1.0 + 1.0));
    }
}
