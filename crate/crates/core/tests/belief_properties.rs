mod common;

use proptest::prelude::*;
use quickest_intervention::belief::{first_order_update, observation_likelihood, predict, update};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec_strategy() -> impl Strategy<Value = quickest_intervention::ProblemSpec> {
    (any::<u64>(), 2usize..7, 1usize..5, 0.01f64..2.0)
        .prop_map(|(seed, z, a, scale)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            common::random_mlr_spec(&mut rng, z, a, scale)
        })
}

proptest! {
    #[test]
    fn posterior_stays_in_unit_interval(spec in spec_strategy(), pi in 0.0f64..=1.0, a_raw in 0usize..8, z_raw in 0usize..8) {
        let a = a_raw % (spec.num_actions + 1);
        let z = z_raw % spec.num_obs;
        let post = update(&spec, pi, a, z);
        prop_assert!((0.0..=1.0).contains(&post));
        let fo = first_order_update(&spec, pi, a, z);
        prop_assert!((0.0..=1.0).contains(&fo));
    }

    #[test]
    fn posterior_is_a_martingale_around_the_prediction(spec in spec_strategy(), pi in 0.0f64..=1.0, a_raw in 0usize..8) {
        let a = a_raw % (spec.num_actions + 1);
        let sigma = observation_likelihood(&spec, pi, a);
        let total: f64 = sigma.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let mean: f64 = (0..spec.num_obs).map(|z| sigma[z] * update(&spec, pi, a, z)).sum();
        prop_assert!((mean - predict(pi, spec.lambda)).abs() < 1e-12);
    }

    #[test]
    fn posterior_matches_independent_bayes(spec in spec_strategy(), pi in 0.0f64..1.0, a_raw in 0usize..8, z_raw in 0usize..8) {
        let a = a_raw % (spec.num_actions + 1);
        let z = z_raw % spec.num_obs;
        let (sigma, post) = common::bayes(&spec, pi, a, z);
        prop_assert!((update(&spec, pi, a, z) - post).abs() < 1e-14);
        prop_assert!((observation_likelihood(&spec, pi, a)[z] - sigma).abs() < 1e-15);
    }

    #[test]
    fn posterior_monotone_in_belief_and_observation(spec in spec_strategy(), p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, a_raw in 0usize..8) {
        let a = a_raw % (spec.num_actions + 1);
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        for z in 0..spec.num_obs {
            prop_assert!(update(&spec, lo, a, z) <= update(&spec, hi, a, z) + 1e-15);
        }
        for z in 1..spec.num_obs {
            prop_assert!(update(&spec, lo, a, z - 1) <= update(&spec, lo, a, z) + 1e-15);
        }
    }
}
