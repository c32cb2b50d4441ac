//! Finite-difference suites over every differentiable piece of the pipeline.
//!
//! Each suite draws random configurations, keeps the ones whose loss is
//! smooth around the drawn point, and compares the analytic gradient with
//! central differences.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::classifier::ClassifierHead;
use crate::embedding::{EmbeddingNet, Modality, NetSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionHead, FusionMode};
use crate::losses::{
    classification_loss, cross_modality_loss_with_grad, lifted_struct_loss, mmsl_pair_grad, mmsl_pair_loss, npair_loss,
    set_losses_from_distances, triplet_loss, CrossReading,
};
use crate::metric::{euclidean_grad, euclidean_sq_grad, finite_diff_check, GradTape, Metric};
use crate::mining::{mine_indices, Label, MarginParams};
use crate::nn::{NormMode, Parameterized};
use crate::objective::{FrameBatch, ObjectiveRegistry};

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-5;

/// A point to check: parameters, analytic gradient and the loss itself.
pub struct Case {
    pub params: Vec<f64>,
    pub grad: Vec<f64>,
    pub loss: Box<dyn FnMut(&[f64]) -> f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub checked: usize,
    /// Draws rejected for sitting within one step of a kink.
    pub rejected: usize,
    pub max_rel_error: f64,
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self, wanted: usize) -> bool {
        self.failures.is_empty() && self.checked >= wanted
    }
}

/// One-sided slopes agree everywhere, so no kink lies within `step`.
fn smooth_at(case: &mut Case, step: f64) -> bool {
    let mut theta = case.params.clone();
    let base = (case.loss)(&theta);
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = (case.loss)(&theta);
        theta[i] = orig - step;
        let minus = (case.loss)(&theta);
        theta[i] = orig;
        let right = (plus - base) / step;
        let left = (base - minus) / step;
        if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
            return false;
        }
    }
    true
}

type Maker = fn(&mut ChaCha8Rng) -> Result<Case>;

fn run_suite(name: &'static str, make: Maker, configs: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SuiteResult {
        name,
        checked: 0,
        rejected: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    let mut attempts = 0;
    while out.checked < configs && attempts < 50 * configs.max(1) {
        attempts += 1;
        let mut case = make(&mut rng)?;
        if !smooth_at(&mut case, STEP) {
            out.rejected += 1;
            continue;
        }
        let tape = GradTape::with_grad(case.params.clone(), case.grad.clone())?;
        let report = finite_diff_check(&mut case.loss, &tape, STEP, TOL)?;
        out.max_rel_error = out.max_rel_error.max(report.max_rel_error);
        if !report.passed() {
            out.failures.push(format!(
                "config {}: max relative error {:.3e} at indices {:?}",
                out.checked, report.max_rel_error, report.failing
            ));
        }
        out.checked += 1;
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn matrix(rows: usize, cols: usize, p: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), p.to_vec()).expect("shape matches")
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn euclid_sq_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.random_range(1..6);
    let p = uniform(rng, 2 * n, -2.0, 2.0);
    let mut grad = euclidean_sq_grad(&p[..n], &p[n..])?;
    grad.extend(grad.clone().iter().map(|g| -g));
    Ok(Case {
        params: p,
        grad,
        loss: Box::new(move |p| crate::metric::euclidean_sq(&p[..n], &p[n..]).unwrap()),
    })
}

fn euclid_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.random_range(1..6);
    let p = uniform(rng, 2 * n, -2.0, 2.0);
    let mut grad = euclidean_grad(&p[..n], &p[n..])?;
    grad.extend(grad.clone().iter().map(|g| -g));
    Ok(Case {
        params: p,
        grad,
        loss: Box::new(move |p| crate::metric::euclidean(&p[..n], &p[n..]).unwrap()),
    })
}

fn triplet_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (rows, dim) = (6, rng.random_range(2..5));
    let p = uniform(rng, rows * dim, -1.0, 1.0);
    let triplets: Vec<(usize, usize, usize)> = (0..4)
        .map(|_| {
            let a = rng.random_range(0..rows);
            (a, (a + 1 + rng.random_range(0..rows - 2)) % rows, (a + rows - 1) % rows)
        })
        .collect();
    let margin = rng.random_range(0.5..2.0);
    let metric = if rng.random::<bool>() { Metric::Squared } else { Metric::Unsquared };
    let g = triplet_loss(matrix(rows, dim, &p).view(), &triplets, margin, metric)?;
    Ok(Case {
        params: p,
        grad: flat(&g.grad),
        loss: Box::new(move |p| triplet_loss(matrix(rows, dim, p).view(), &triplets, margin, metric).unwrap().loss.value),
    })
}

fn npair_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (n, dim) = (rng.random_range(2..6), rng.random_range(2..5));
    let p = uniform(rng, 2 * n * dim, -1.5, 1.5);
    let (_, da, dp) = npair_loss(matrix(n, dim, &p[..n * dim]).view(), matrix(n, dim, &p[n * dim..]).view())?;
    let mut grad = flat(&da);
    grad.extend(flat(&dp));
    Ok(Case {
        params: p,
        grad,
        loss: Box::new(move |p| {
            npair_loss(matrix(n, dim, &p[..n * dim]).view(), matrix(n, dim, &p[n * dim..]).view())
                .unwrap()
                .0
                .value
        }),
    })
}

fn lifted_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (rows, dim) = (6, rng.random_range(2..4));
    let p = uniform(rng, rows * dim, -1.0, 1.0);
    let labels = vec![0, 0, 1, 1, 2, 0];
    let beta = rng.random_range(0.5..3.0);
    let metric = if rng.random::<bool>() { Metric::Squared } else { Metric::Unsquared };
    let g = lifted_struct_loss(matrix(rows, dim, &p).view(), &labels, beta, metric)?;
    Ok(Case {
        params: p,
        grad: flat(&g.grad),
        loss: Box::new(move |p| lifted_struct_loss(matrix(rows, dim, p).view(), &labels, beta, metric).unwrap().loss.value),
    })
}

fn pair_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let params = MarginParams::default();
    let label = if rng.random::<bool>() { Label::Positive } else { Label::Negative };
    let d = rng.random_range(0.0..4.0);
    Ok(Case {
        params: vec![d],
        grad: vec![mmsl_pair_grad(d, label, &params)],
        loss: Box::new(move |p| mmsl_pair_loss(p[0].max(0.0), label, &params).unwrap()),
    })
}

fn labels_for(n: usize, rng: &mut ChaCha8Rng) -> Vec<Label> {
    let mut labels: Vec<Label> = (0..n)
        .map(|_| if rng.random::<bool>() { Label::Positive } else { Label::Negative })
        .collect();
    labels[0] = Label::Positive;
    labels[n - 1] = Label::Negative;
    labels
}

fn set_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let params = MarginParams::default();
    let n = rng.random_range(2..10);
    let labels = labels_for(n, rng);
    let d = uniform(rng, n, 0.5, 3.0);
    let eval = move |d: &[f64]| {
        let mined = mine_indices(d, &labels, &params);
        set_losses_from_distances(d, &labels, &mined, &params)
    };
    let (_, grad) = eval(&d);
    Ok(Case {
        params: d,
        grad,
        loss: Box::new(move |d| eval(d).0.sum()),
    })
}

fn cross_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let sizes: Vec<usize> = (0..4).map(|_| rng.random_range(1..5)).collect();
    let total: usize = sizes.iter().sum();
    let p = uniform(rng, total, 0.0, 3.0);
    let delta = rng.random_range(0.0..0.5);
    let reading = if rng.random::<bool>() { CrossReading::Worst } else { CrossReading::Mean };
    let split = move |p: &[f64]| -> [Vec<f64>; 4] {
        let mut off = 0;
        let mut out: [Vec<f64>; 4] = Default::default();
        for (k, &s) in sizes.iter().enumerate() {
            out[k] = p[off..off + s].to_vec();
            off += s;
        }
        out
    };
    let [a, b, c, d] = split(&p);
    let (_, g) = cross_modality_loss_with_grad(&a, &b, &c, &d, delta, reading)?;
    let grad = [g.pos_r, g.neg_r, g.pos_t, g.neg_t].concat();
    Ok(Case {
        params: p,
        grad,
        loss: Box::new(move |p| {
            let [a, b, c, d] = split(p);
            cross_modality_loss_with_grad(&a, &b, &c, &d, delta, reading).unwrap().0
        }),
    })
}

fn total_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let names = ObjectiveRegistry::default().names();
    let name = names[rng.random_range(0..names.len())];
    let objective = ObjectiveRegistry::default().get(name)?;
    let (n, dim) = (rng.random_range(3..8), rng.random_range(2..4));
    let labels = labels_for(n, rng);
    let p = uniform(rng, 2 * (n + 1) * dim, -0.9, 0.9);
    let params = MarginParams::default();
    let metric = if rng.random::<bool>() { Metric::Squared } else { Metric::Unsquared };
    let half = (n + 1) * dim;
    let eval = move |p: &[f64]| {
        let r = matrix(n + 1, dim, &p[..half]);
        let t = matrix(n + 1, dim, &p[half..]);
        objective
            .evaluate(&FrameBatch {
                emb_r: r.view(),
                emb_t: t.view(),
                labels: &labels,
                params: &params,
                metric,
                cross_reading: CrossReading::Worst,
            })
            .unwrap()
    };
    let out = eval(&p);
    let mut grad = flat(&out.grad_r);
    grad.extend(flat(&out.grad_t));
    Ok(Case {
        params: p,
        grad,
        loss: Box::new(move |p| eval(p).loss.value),
    })
}

fn classification_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.random_range(1..8);
    let labels = labels_for(n.max(2), rng)[..n].to_vec();
    let p = uniform(rng, 2 * n, -4.0, 4.0);
    let g = classification_loss(matrix(n, 2, &p).view(), &labels)?;
    Ok(Case {
        params: p,
        grad: flat(&g.grad),
        loss: Box::new(move |p| classification_loss(matrix(n, 2, p).view(), &labels).unwrap().loss.value),
    })
}

fn readout_weights(rows: usize, cols: usize, salt: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 7 + j * 3) as f64 * 0.41 + salt).sin())
}

fn embedding_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let depth = rng.random_range(1..4);
    let mut dims = vec![rng.random_range(2..9)];
    for _ in 0..depth {
        dims.push(rng.random_range(2..9));
    }
    let mut net = EmbeddingNet::init(NetSpec::mlp(&dims), Modality::Rgb, rng.random())?;
    net.visit_params_mut(&mut |p, _| p.iter_mut().for_each(|v| *v += 0.1 * (v.sin() + 0.3)));
    let rows = rng.random_range(3..7);
    let x = Array2::from_shape_vec((rows, dims[0]), uniform(rng, rows * dims[0], -1.0, 1.0)).expect("shape");
    // squared distances of every row to row 0, the training readout
    let readout = |e: &Array2<f64>| -> (f64, Array2<f64>) {
        let mut g = Array2::zeros(e.raw_dim());
        let mut total = 0.0;
        for i in 1..e.nrows() {
            for k in 0..e.ncols() {
                let diff = e[[i, k]] - e[[0, k]];
                total += diff * diff;
                g[[i, k]] += 2.0 * diff;
                g[[0, k]] -= 2.0 * diff;
            }
        }
        (total, g)
    };
    let (e, cache) = net.forward_frozen(x.view(), NormMode::Batch)?;
    net.zero_grad();
    net.backward(&cache, readout(&e).1);
    let tape = net.tape();
    let mut probe = net.clone();
    Ok(Case {
        params: tape.params().to_vec(),
        grad: tape.grad().to_vec(),
        loss: Box::new(move |p| {
            probe.load_params(p).unwrap();
            readout(&probe.forward_frozen(x.view(), NormMode::Batch).unwrap().0).0
        }),
    })
}

fn fusion_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let dim = rng.random_range(1..6);
    let rows = rng.random_range(1..5);
    let modes = [FusionMode::Attention, FusionMode::Sigmoid, FusionMode::Concat];
    let mut head = FusionHead::init(dim, modes[rng.random_range(0..3)], rng.random());
    let x = uniform(rng, 2 * rows * dim, -1.5, 1.5);
    let w = readout_weights(rows, 2 * dim, rng.random());
    let np = head.num_params();
    let half = rows * dim;
    let (out, cache) = head.forward(matrix(rows, dim, &x[..half]).view(), matrix(rows, dim, &x[half..]).view())?;
    let _ = out;
    head.zero_grad();
    let (d_r, d_t) = head.backward(&cache, w.view());
    let mut params = head.flat_params();
    params.extend(&x);
    let mut grad = head.flat_grads();
    grad.extend(flat(&d_r));
    grad.extend(flat(&d_t));
    let mut probe = head.clone();
    Ok(Case {
        params,
        grad,
        loss: Box::new(move |p| {
            probe.load_params(&p[..np]).unwrap();
            let x = &p[np..];
            let (out, _) = probe
                .forward(matrix(rows, dim, &x[..half]).view(), matrix(rows, dim, &x[half..]).view())
                .unwrap();
            (&out * &w).sum()
        }),
    })
}

fn classifier_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut dims = vec![rng.random_range(2..7)];
    for _ in 0..rng.random_range(0..3) {
        dims.push(rng.random_range(2..7));
    }
    dims.push(2);
    let mut head = ClassifierHead::init(&dims, rng.random())?;
    let rows = rng.random_range(1..5);
    let x = matrix(rows, dims[0], &uniform(rng, rows * dims[0], -1.5, 1.5));
    let labels = labels_for(rows.max(2), rng)[..rows].to_vec();
    let (logits, cache) = head.forward(x.view())?;
    let g = classification_loss(logits.view(), &labels)?;
    head.zero_grad();
    head.backward(&cache, g.grad);
    let tape = head.tape();
    let mut probe = head.clone();
    Ok(Case {
        params: tape.params().to_vec(),
        grad: tape.grad().to_vec(),
        loss: Box::new(move |p| {
            probe.load_params(p).unwrap();
            let (logits, _) = probe.forward(x.view()).unwrap();
            classification_loss(logits.view(), &labels).unwrap().loss.value
        }),
    })
}

pub const SUITES: [(&str, Maker); 13] = [
    ("euclidean_sq", euclid_sq_case),
    ("euclidean", euclid_case),
    ("triplet", triplet_case),
    ("npair", npair_case),
    ("lifted_struct", lifted_case),
    ("mmsl_pair", pair_case),
    ("mmsl_set", set_case),
    ("cross_modality", cross_case),
    ("objective_total", total_case),
    ("classification", classification_case),
    ("embedding_net", embedding_case),
    ("fusion_head", fusion_case),
    ("classifier_head", classifier_case),
];

/// Runs every suite with `configs` accepted configurations each.
pub fn run_all(configs: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    SUITES
        .iter()
        .enumerate()
        .map(|(k, (name, make))| run_suite(name, *make, configs, seed.wrapping_add(k as u64 * 7919)))
        .collect()
}

/// Runs one suite by name.
pub fn run_named(name: &str, configs: usize, seed: u64) -> Result<SuiteResult> {
    let (k, (n, make)) = SUITES
        .iter()
        .enumerate()
        .find(|(_, (n, _))| *n == name)
        .ok_or_else(|| Error::Unknown {
            kind: "gradient suite",
            name: name.into(),
            known: SUITES.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "),
        })?;
    run_suite(n, *make, configs, seed.wrapping_add(k as u64 * 7919))
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_a_few_configs() {
        for r in run_all(4, 1).unwrap() {
            assert!(r.passed(4), "{}: {:?} ({} checked)", r.name, r.failures, r.checked);
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let make: Maker = |rng| {
            let mut c = euclid_sq_case(rng)?;
            c.grad.iter_mut().for_each(|g| *g *= 2.0);
            Ok(c)
        };
        let r = run_suite("broken", make, 3, 0).unwrap();
        assert_eq!(r.failures.len(), 3);
    }
}
