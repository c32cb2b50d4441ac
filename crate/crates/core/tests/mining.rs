mod common;

use common::{mine_oracle, random_batch, rng};
use mmsl::mining::{mine, MarginParams};
use mmsl::Metric;
use proptest::prelude::*;

#[test]
fn mine_matches_oracle_on_random_batches() {
    let mut r = rng(11);
    let params = MarginParams::new(1.0, 0.1, 1.25, 0.2).unwrap();
    for _ in 0..300 {
        let (anchor, samples) = random_batch(&mut r, 200);
        for metric in [Metric::Squared, Metric::Unsquared] {
            assert_eq!(mine(&anchor, &samples, &params, metric).unwrap(), mine_oracle(&anchor, &samples, &params, metric));
        }
    }
}

#[test]
fn exact_boundary_distances_are_not_mined() {
    let params = MarginParams::new(1.0, 0.1, 1.25, 0.2).unwrap();
    let mut r = rng(5);
    let mut boundary_seen = 0;
    for _ in 0..200 {
        let (anchor, samples) = random_batch(&mut r, 50);
        let mined = mine(&anchor, &samples, &params, Metric::Squared).unwrap();
        for s in &samples {
            let d: f64 = anchor.iter().zip(s.embedding.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d == 1.0 {
                boundary_seen += 1;
                assert!(!mined.confusing_positives.contains(&s.sample_id));
            }
            if d == 2.25 {
                boundary_seen += 1;
                assert!(!mined.confusing_negatives.contains(&s.sample_id));
            }
        }
    }
    assert!(boundary_seen > 0);
}

proptest! {
    #[test]
    fn larger_alpha_never_adds_confusing_positives(seed in any::<u64>(), a in 0.3f64..3.0, da in 0.0f64..1.0) {
        let (anchor, samples) = random_batch(&mut rng(seed), 60);
        let small = MarginParams::new(a, 0.1, 0.2, 0.2).unwrap();
        let large = MarginParams::new(a + da, 0.1, 0.2, 0.2).unwrap();
        let p_small = mine(&anchor, &samples, &small, Metric::Squared).unwrap().confusing_positives;
        let p_large = mine(&anchor, &samples, &large, Metric::Squared).unwrap().confusing_positives;
        prop_assert!(p_large.iter().all(|id| p_small.contains(id)));
    }

    #[test]
    fn larger_m_never_drops_confusing_negatives(seed in any::<u64>(), m in 0.0f64..1.0, dm in 0.0f64..1.0) {
        let (anchor, samples) = random_batch(&mut rng(seed), 60);
        let small = MarginParams::new(1.6, 0.1, m, 0.2).unwrap();
        let large = MarginParams::new(1.6, 0.1, m + dm, 0.2).unwrap();
        let n_small = mine(&anchor, &samples, &small, Metric::Squared).unwrap().confusing_negatives;
        let n_large = mine(&anchor, &samples, &large, Metric::Squared).unwrap().confusing_negatives;
        prop_assert!(n_small.iter().all(|id| n_large.contains(id)));
    }
}
