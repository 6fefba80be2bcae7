mod common;

use common::{random_convnet, random_mlp, MlpShape};
use pxlab::data::Batch;
use pxlab::model::mlp6_specs;
use pxlab::paths::verify_bound;
use pxlab::pruning::{keep_count, prunable_positions, prune_observed, px_saliency, schedule_density, Method, PruneConfig};
use pxlab::{Network, Rng};
use proptest::prelude::*;

const SHAPE: MlpShape = MlpShape { max_depth: 4, max_width: 5, max_outputs: 3, max_batch: 5 };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bound_holds(seed in any::<u64>()) {
        let (net, x) = random_mlp(&mut Rng::new(seed), SHAPE, true);
        let c = verify_bound(&net, &x).unwrap();
        prop_assert!(c.holds, "trace {} bound {}", c.trace, c.bound);
    }

    #[test]
    fn px_scores_are_nonnegative(seed in any::<u64>(), conv in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let (net, x) = if conv { random_convnet(&mut rng) } else { random_mlp(&mut rng, SHAPE, true) };
        let s = px_saliency(&net, &[x], true).unwrap();
        prop_assert!(s.values.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn schedule_is_monotone_and_exact_at_the_end(k in 0.001f64..1.0, rounds in 1usize..200) {
        let mut prev = 1.0;
        for t in 1..=rounds {
            let d = schedule_density(k, t, rounds).unwrap();
            prop_assert!(d <= prev && d >= k);
            prev = d;
        }
        prop_assert_eq!(schedule_density(k, rounds, rounds).unwrap(), k);
    }

    #[test]
    fn masks_nest_with_exact_final_count(seed in 0u64..1000, k in 0.01f64..0.9, rounds in 1usize..8) {
        let mut rng = Rng::new(seed);
        let net = Network::build(&[3], mlp6_specs(3, 2, 5, true), &mut rng).unwrap();
        let x = rng.normal(&[4, 3], 0.0, 1.0).unwrap();
        let set = [Batch { x, y: vec![0, 1, 0, 1] }];
        for method in [Method::PX, Method::SynFlow, Method::Random] {
            let mut rounds_seen = Vec::new();
            let cfg = PruneConfig::new(method, k).rounds(rounds).seed(seed);
            let mask = prune_observed(&net, &cfg, &set, |_, m| rounds_seen.push(m.to_vec())).unwrap();
            for w in rounds_seen.windows(2) {
                prop_assert!(w[0].iter().zip(&w[1]).all(|(a, b)| b <= a));
            }
            let positions = prunable_positions(&net, false);
            let kept = positions.iter().filter(|&&j| mask[j] == 1.0).count();
            prop_assert_eq!(kept, keep_count(k, positions.len()));
        }
    }
}
