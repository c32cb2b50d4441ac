#![allow(dead_code)]

use mmsl::embedding::Modality;
use mmsl::mining::{Label, LabeledEmbedding, MarginParams, MinedSets};
use mmsl::{Metric, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Literal per-sample scan, written without touching the library's mining code.
pub fn mine_oracle(anchor: &[f64], samples: &[LabeledEmbedding], params: &MarginParams, metric: Metric) -> MinedSets {
    let mut out = MinedSets {
        modality: samples.first().map(|s| s.modality),
        ..MinedSets::default()
    };
    for s in samples {
        let mut sq = 0.0;
        for (a, b) in anchor.iter().zip(s.embedding.as_slice()) {
            sq += (a - b) * (a - b);
        }
        let d = match metric {
            Metric::Squared => sq,
            Metric::Unsquared => sq.sqrt(),
        };
        match s.label {
            Label::Positive => {
                if d > params.alpha {
                    out.confusing_positives.push(s.sample_id);
                }
            }
            Label::Negative => {
                if d < params.alpha + params.m {
                    out.confusing_negatives.push(s.sample_id);
                }
            }
        }
    }
    out
}

/// A random batch of up to `max_n` samples; some distances land exactly on
/// the boundaries.
pub fn random_batch(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<LabeledEmbedding>) {
    let dim = rng.random_range(1..6);
    let anchor: Vec<f64> = (0..dim).map(|_| rng.random_range(-8..8) as f64 / 8.0).collect();
    let n = rng.random_range(0..=max_n);
    let samples = (0..n)
        .map(|i| {
            let mut e: Vec<f64> = anchor.iter().map(|a| a + rng.random_range(-1.2..1.2)).collect();
            if rng.random_range(0..10) == 0 {
                // squared distance exactly 1 or 2.25 along one axis
                e = anchor.clone();
                e[0] += if rng.random::<bool>() { 1.5 } else { 1.0 };
            }
            LabeledEmbedding {
                embedding: Vector::new(e).unwrap(),
                label: if rng.random::<bool>() { Label::Positive } else { Label::Negative },
                modality: Modality::Rgb,
                sample_id: 1000 + i as u64,
            }
        })
        .collect();
    (anchor, samples)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
