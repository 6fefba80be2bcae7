//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use common::{chain, fixture_221, fixture_3442, random_convnet, random_mlp, rel_err, MlpShape};
use nalgebra::DMatrix;
use pxlab::autodiff::{forward, grad_check, ActivationMode, ScalarHead};
use pxlab::data::{encode_idx_images, encode_idx_labels, load_idx};
use pxlab::experiment::{build_network, compute_mask, density_of, ntk_trace, prepare, run_sweep, ExperimentConfig};
use pxlab::model::mlp6_specs;
use pxlab::ntk::{bound_terms, eigenspectrum, jacobian, ntk_from_jacobian};
use pxlab::paths::{enumerate_paths, frob_jvf, frob_jtv, output_via_paths, px_scores, verify_bound};
use pxlab::pruning::{keep_count, prunable_positions, prune, prune_observed, px_saliency, Method, PruneConfig};
use pxlab::{Error, Network, Rng, Tensor};
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

const SMALL: MlpShape = MlpShape { max_depth: 4, max_width: 6, max_outputs: 3, max_batch: 8 };

fn bound_theorem() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut holds = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..100 {
        let (net, x) = random_mlp(&mut rng, SMALL, true);
        let check = verify_bound(&net, &x).expect("verify_bound");
        holds += usize::from(check.holds);
        min_slack = min_slack.min(check.relative_slack());
    }
    let elapsed = start.elapsed();
    outcome(
        holds == 100 && min_slack >= -1e-8 && elapsed < Duration::from_secs(60),
        format!("{holds}/100 hold, min relative slack {min_slack:.3e}, {elapsed:.2?}"),
    )
}

fn single_path_tightness() -> Outcome {
    let mut rng = Rng::new(202);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for depth in 1..=6 {
        for _ in 0..20 {
            let w: Vec<f64> = (0..depth).map(|_| rng.standard_normal() * 2.0).collect();
            let net = chain(&w);
            let x = Tensor::new(vec![1, 1], vec![rng.standard_normal()]).unwrap();
            let c = verify_bound(&net, &x).unwrap();
            worst = worst.max(rel_err(c.trace, c.bound));
            cases += 1;
        }
    }
    let fixture = verify_bound(&chain(&[2.0, 3.0]), &Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
    outcome(
        worst <= 1e-10 && fixture.trace == 13.0 && fixture.bound == 13.0,
        format!(
            "{cases} chains, worst rel gap {worst:.2e}; (2,3) fixture trace {} bound {}",
            fixture.trace, fixture.bound
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(303);
    let shape = MlpShape { max_depth: 4, max_width: 8, max_outputs: 3, max_batch: 6 };
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 50 {
        let (net, x) = random_mlp(&mut rng, shape, true);
        if enumerate_paths(&net).unwrap().len() > 10_000 {
            continue;
        }
        let terms = bound_terms(&net, &x).unwrap();
        worst = worst.max(rel_err(terms.jvf_sq, frob_jvf(&net, &x).unwrap()));
        worst = worst.max(rel_err(terms.jtv_sq, frob_jtv(&net).unwrap()));
        done += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && elapsed < Duration::from_secs(60),
        format!("50 nets, worst rel err {worst:.2e}, {elapsed:.2?}"),
    )
}

fn px_correctness() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (name, (net, x)) in [("2-2-1", fixture_221()), ("3-4-4-2", fixture_3442())] {
        let fast = px_saliency(&net, std::slice::from_ref(&x), false).unwrap().values;
        let oracle = px_scores(&net, &x).unwrap();
        let worst = fast.iter().zip(&oracle).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max);
        let nonzero = oracle.iter().filter(|v| **v > 0.0).count();
        pass &= worst <= 1e-9 && nonzero > 0;
        details.push(format!("{name}: worst rel err {worst:.2e} over {} scores ({nonzero} nonzero)", oracle.len()));
    }
    outcome(pass, details.join("; "))
}

fn path_layer_equivalence() -> Outcome {
    let mut rng = Rng::new(505);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (net, x) = random_mlp(&mut rng, SMALL, true);
        let layer = forward(&net, &x, ActivationMode::Standard).unwrap().output;
        let paths = output_via_paths(&net, &x).unwrap();
        for (a, b) in layer.data().iter().zip(paths.data()) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    outcome(worst <= 1e-10, format!("50 nets, worst rel err {worst:.2e}"))
}

fn gradient_correctness() -> Outcome {
    let mut rng = Rng::new(606);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for i in 0..50 {
        let (net, x) = if i % 2 == 0 { random_mlp(&mut rng, SMALL, true) } else { random_convnet(&mut rng) };
        let out = forward(&net, &x, ActivationMode::Standard).unwrap().output;
        let head = ScalarHead::Weighted(rng.normal(out.shape(), 0.0, 1.0).unwrap());
        let report = grad_check(&net, &x, &head, 1e-6).unwrap();
        worst = worst.max(report.max_rel_err);
        checked += report.checked;
        skipped += report.skipped.len();
    }
    outcome(
        worst < 1e-4 && checked > 0,
        format!("25 MLPs + 25 conv nets, {checked} parameters checked ({skipped} skipped at ReLU kinks), max rel err {worst:.2e}"),
    )
}

fn spirals_config(extra: &str) -> String {
    format!(
        r#"{{"architecture": "mlp6", "width": 64,
            "dataset": {{"kind": "spirals", "n_per_class": 250, "noise": 0.02, "test_per_class": 250}},
            "methods": ["px"], "sparsities": [99.0], "seeds": [0], "ntk_probe": 0{extra}}}"#
    )
}

fn convnet_config(extra: &str) -> String {
    format!(
        r#"{{"architecture": "convnet4", "channels": 8,
            "dataset": {{"kind": "blob_images", "n_per_class": 20, "classes": 4, "side": 8, "spread": 0.5}},
            "methods": ["px"], "sparsities": [99.0], "seeds": [0], "ntk_probe": 0{extra}}}"#
    )
}

fn connectivity_runs(cfg: &ExperimentConfig, sparsity: f64, rounds: usize, seeds: u64) -> usize {
    let data = prepare(cfg).unwrap();
    (0..seeds)
        .filter(|&seed| {
            let net = build_network(cfg, &data, seed).unwrap();
            let mask = compute_mask(cfg, &data, &net, Method::PX, density_of(sparsity), rounds, seed).unwrap();
            net.with_mask(&mask).unwrap().check_connectivity()
        })
        .count()
}

fn positivity_and_collapse() -> Outcome {
    let mut rng = Rng::new(707);
    let mut negatives = 0;
    for i in 0..100 {
        let (net, x) = if i % 4 == 3 { random_convnet(&mut rng) } else { random_mlp(&mut rng, SMALL, true) };
        let s = px_saliency(&net, &[x], true).unwrap();
        negatives += s.values.iter().filter(|v| **v < 0.0).count();
    }
    let mlp = ExperimentConfig::from_json(&spirals_config("")).unwrap();
    let conv = ExperimentConfig::from_json(&convnet_config("")).unwrap();
    let mlp_ok = connectivity_runs(&mlp, 99.0, 20, 10);
    let conv_ok = connectivity_runs(&conv, 99.0, 20, 10);

    // Contrast: MLP-6 whose third dense layer is scaled by 1e-3, pruned once by magnitude.
    let base = Network::build(&[2], mlp6_specs(2, 2, 16, false), &mut Rng::new(7)).unwrap();
    let (_, third) = base.parametric_layers().nth(2).unwrap();
    let mut params = base.params().to_vec();
    for j in third.range() {
        params[j] *= 1e-3;
    }
    let shrunk = Network::from_params(&[2], base.layers().to_vec(), params).unwrap();
    let set = [pxlab::data::Batch { x: Tensor::ones(&[2, 2]), y: vec![0, 1] }];
    let magnitude = prune(&shrunk, &PruneConfig::new(Method::Magnitude, 0.01), &set).unwrap();
    let collapsed = !shrunk.with_mask(&magnitude).unwrap().check_connectivity();
    outcome(
        negatives == 0 && mlp_ok == 10 && conv_ok == 10 && collapsed,
        format!(
            "negative PX scores {negatives}; T=20 at 99%: MLP-6 {mlp_ok}/10, ConvNet-4 {conv_ok}/10 connected; \
             shrunk-layer fixture collapses under magnitude: {collapsed}"
        ),
    )
}

fn schedule_contract() -> Outcome {
    let mut rng = Rng::new(808);
    let net = Network::build(&[3], mlp6_specs(3, 3, 12, true), &mut rng).unwrap();
    let x = rng.normal(&[6, 3], 0.0, 1.0).unwrap();
    let set = [pxlab::data::Batch { x, y: vec![0, 1, 2, 0, 1, 2] }];
    let positions = prunable_positions(&net, false);
    let m = positions.len();
    let mut pass = true;
    let mut notes = Vec::new();
    for method in [Method::PX, Method::SynFlow, Method::SynFlowL2, Method::SNIP, Method::GraSP, Method::Magnitude, Method::Random] {
        for k in [0.5, 0.1, 0.013] {
            let cfg = PruneConfig::new(method, k).rounds(10).seed(4);
            let mut masks = Vec::new();
            let mask = prune_observed(&net, &cfg, &set, |_, m| masks.push(m.to_vec())).unwrap();
            let nested = masks.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| b <= a));
            let kept = positions.iter().filter(|&&j| mask[j] == 1.0).count();
            let again = prune(&net, &cfg, &set).unwrap();
            let identical = again.iter().map(|v| v.to_bits()).eq(mask.iter().map(|v| v.to_bits()));
            let ok = nested && kept == keep_count(k, m) && identical;
            if !ok {
                notes.push(format!("{method} k={k}: nested={nested} kept={kept} expected={} identical={identical}", keep_count(k, m)));
            }
            pass &= ok;
        }
    }
    let ties = pxlab::pruning::global_topk_mask(&[2.0; 4], 0.5, &[1.0; 4]).unwrap();
    pass &= ties == vec![1.0, 1.0, 0.0, 0.0];
    if notes.is_empty() {
        notes.push(format!("7 methods x 3 densities over {m} prunable weights: nested, exact counts, byte-identical reruns; tie rule keeps lower indices"));
    }
    outcome(pass, notes.join("; "))
}

fn spectrum_identity() -> Outcome {
    let mut rng = Rng::new(909);
    let (mut eig_err, mut trace_err, mut frob_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for i in 0..20 {
        let (net, x) = if i % 2 == 0 { random_mlp(&mut rng, SMALL, true) } else { random_convnet(&mut rng) };
        let j = jacobian(&net, &x).unwrap();
        let r = ntk_from_jacobian(&j).unwrap();
        let eigs = eigenspectrum(&r.kernel).unwrap();
        let (rows, cols) = (j.shape()[0], j.shape()[1]);
        let svd = DMatrix::from_row_slice(rows, cols, j.data()).svd(false, false);
        let mut sq: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
        sq.resize(rows, 0.0);
        sq.sort_by(|a, b| b.total_cmp(a));
        let top = eigs[0].abs().max(sq[0]);
        if top > 0.0 {
            for (a, b) in eigs.iter().zip(&sq) {
                eig_err = eig_err.max((a - b).abs() / top);
            }
        }
        trace_err = trace_err.max(rel_err(r.trace, eigs.iter().sum()));
        frob_err = frob_err.max(rel_err(r.trace, r.trace_frobenius));
    }
    outcome(
        eig_err <= 1e-8 && trace_err <= 1e-8 && frob_err <= 1e-10,
        format!("20 nets: eigenvalue vs squared singular value {eig_err:.2e} (relative to the largest), trace vs sum of eigenvalues {trace_err:.2e}, diagonal vs Frobenius {frob_err:.2e}"),
    )
}

fn pruning_quality() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_json(
        r#"{"architecture": "mlp6", "width": 64,
            "dataset": {"kind": "spirals", "n_per_class": 250, "noise": 0.02, "test_per_class": 250},
            "methods": ["px", "random", "synflow-l2"], "sparsities": [90.0, 95.0, 98.2], "rounds": 100,
            "seeds": [0, 1, 2, 3, 4], "ntk_probe": 0,
            "train": {"epochs": 100, "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0001, "batch_size": 32}}"#,
    )
    .unwrap();
    let table = run_sweep(&cfg, None).unwrap();
    let mean = |method: Method, s: f64| -> f64 {
        let accs: Vec<f64> = table
            .cells
            .iter()
            .filter(|c| c.method == method && c.sparsity_pct == s)
            .map(|c| c.outcome.as_ref().unwrap().test_acc.unwrap())
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let mut beats_random = 0;
    let mut beats_l2 = 0;
    let mut cols = Vec::new();
    for s in [90.0, 95.0, 98.2] {
        let (px, random, l2) = (mean(Method::PX, s), mean(Method::Random, s), mean(Method::SynFlowL2, s));
        beats_random += usize::from(px >= random);
        beats_l2 += usize::from(px >= l2);
        cols.push(format!("{s}%: px {px:.4} random {random:.4} synflow-l2 {l2:.4}"));
    }
    let elapsed = start.elapsed();
    outcome(
        table.failures == 0 && beats_random == 3 && beats_l2 >= 2 && elapsed < Duration::from_secs(1800),
        format!("{}; PX >= random at {beats_random}/3, PX >= synflow-l2 at {beats_l2}/3, {elapsed:.0?}", cols.join(", ")),
    )
}

fn spectrum_preservation() -> Outcome {
    let cfg = ExperimentConfig::from_json(
        r#"{"architecture": "mlp6", "width": 64,
            "dataset": {"kind": "blobs", "n_per_class": 40, "classes": 4, "dim": 8, "spread": 0.5},
            "methods": ["px", "random"], "sparsities": [93.12], "rounds": 100, "seeds": [0], "ntk_probe": 8}"#,
    )
    .unwrap();
    let data = prepare(&cfg).unwrap();
    let probe = data.probe.clone().unwrap();
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let net = build_network(&cfg, &data, seed).unwrap();
        let dense = ntk_trace(&net, &probe).unwrap();
        let ratio = |m: Method| {
            let mask = compute_mask(&cfg, &data, &net, m, density_of(93.12), cfg.rounds, seed).unwrap();
            ntk_trace(&net.with_mask(&mask).unwrap(), &probe).unwrap() / dense
        };
        let (px, random) = (ratio(Method::PX), ratio(Method::Random));
        wins += usize::from(px > random);
        ratios.push(format!("{px:.3}/{random:.3}"));
    }
    outcome(wins >= 4, format!("PX/random trace ratios {}; PX higher in {wins}/5 seeds", ratios.join(" ")))
}

fn layer_width_direction() -> Outcome {
    let cfg = ExperimentConfig::from_json(&convnet_config("")).unwrap();
    let data = prepare(&cfg).unwrap();
    let mut ok = 0;
    let mut min_widths = Vec::new();
    for seed in 0..10 {
        let net = build_network(&cfg, &data, seed).unwrap();
        let mask = compute_mask(&cfg, &data, &net, Method::PX, density_of(98.2), 100, seed).unwrap();
        let widths = net.with_mask(&mask).unwrap().active_output_units();
        let min = widths.iter().map(|w| w.active_units).min().unwrap();
        ok += usize::from(min >= 1);
        min_widths.push(min.to_string());
    }
    outcome(ok == 10, format!("{ok}/10 seeds keep every layer active; narrowest layer per seed [{}]", min_widths.join(" ")))
}

fn idx_loader() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as u8).collect();
    std::fs::write(&img, encode_idx_images(4, 5, &pixels)).unwrap();
    std::fs::write(&lab, encode_idx_labels(&[2, 0, 1])).unwrap();
    let ds = load_idx(&img, &lab).unwrap();
    let exact = ds.x.shape() == [3, 1, 4, 5]
        && ds.x.data().iter().zip(&pixels).all(|(v, p)| v.to_bits() == (f64::from(*p) / 255.0).to_bits())
        && ds.y == vec![2, 0, 1];
    let written = encode_idx_images(4, 5, &pixels);
    let round_trip = std::fs::read(&img).unwrap() == written;

    let wrong_magic = matches!(load_idx(&lab, &img), Err(Error::WrongMagic { .. }));
    std::fs::write(&img, &written[..written.len() - 7]).unwrap();
    let truncated = matches!(load_idx(&img, &lab), Err(Error::Truncated(_)));
    std::fs::write(&img, &written).unwrap();
    std::fs::write(&lab, encode_idx_labels(&[2, 0])).unwrap();
    let mismatch = matches!(load_idx(&img, &lab), Err(Error::CountMismatch { images: 3, labels: 2 }));
    outcome(
        exact && round_trip && wrong_magic && truncated && mismatch,
        format!("bit-exact={exact} round-trip={round_trip} wrong-magic={wrong_magic} truncated={truncated} count-mismatch={mismatch}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("trace bound on random MLPs", bound_theorem),
        ("single-path tightness", single_path_tightness),
        ("g/h terms equal path sums", oracle_equivalence),
        ("PX saliency equals path closed form", px_correctness),
        ("path-wise output equals layer-wise forward", path_layer_equivalence),
        ("backward equals finite differences", gradient_correctness),
        ("positivity and no layer collapse", positivity_and_collapse),
        ("schedule and masking contract", schedule_contract),
        ("spectrum identities", spectrum_identity),
        ("pruning quality on spirals", pruning_quality),
        ("NTK trace preservation on blobs", spectrum_preservation),
        ("layer widths on ConvNet-4", layer_width_direction),
        ("IDX loader", idx_loader),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("C{:02}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let out = run();
        failed += usize::from(!out.pass);
        println!("[{}] {id} {name}: {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
    }
    println!("acceptance: {} failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
