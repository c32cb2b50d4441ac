//! Distances, parameter tapes and finite-difference gradient checking.
//!
//! Everything here is `f64`; the gradient checks run at a relative tolerance
//! of `1e-5` which single precision cannot reach.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A finite, non-empty feature or embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::contract("vector must have at least one component"));
        }
        if let Some((i, &v)) = components.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("vector component {i}"),
                value: v,
            });
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Which distance the metric-learning losses and the miner consume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `sum_k (u_k - v_k)^2`
    #[default]
    Squared,
    /// `sqrt(sum_k (u_k - v_k)^2)`
    Unsquared,
}

impl Metric {
    pub fn distance(self, u: &[f64], v: &[f64]) -> Result<f64> {
        match self {
            Metric::Squared => euclidean_sq(u, v),
            Metric::Unsquared => euclidean(u, v),
        }
    }

    /// Distance without the dimension check, for hot loops that already
    /// validated their shapes.
    pub(crate) fn eval(self, u: &[f64], v: &[f64]) -> f64 {
        let sq = sq_dist(u, v);
        match self {
            Metric::Squared => sq,
            Metric::Unsquared => sq.sqrt(),
        }
    }

    /// `d distance / d u` written into `out`; the gradient w.r.t. `v` is `-out`.
    ///
    /// The unsquared metric uses the zero subgradient at `u == v`.
    pub(crate) fn grad_into(self, u: &[f64], v: &[f64], out: &mut [f64]) {
        match self {
            Metric::Squared => {
                for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
                    *o = 2.0 * (a - b);
                }
            }
            Metric::Unsquared => {
                let d = sq_dist(u, v).sqrt();
                if d == 0.0 {
                    out.iter_mut().for_each(|o| *o = 0.0);
                } else {
                    for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
                        *o = (a - b) / d;
                    }
                }
            }
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Metric::Squared),
            "unsquared" => Ok(Metric::Unsquared),
            other => Err(Error::Unknown {
                kind: "distance convention",
                name: other.to_string(),
                known: "squared, unsquared".into(),
            }),
        }
    }
}

#[inline]
pub(crate) fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Squared Euclidean distance.
pub fn euclidean_sq(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dim(u.len(), v.len())?;
    Ok(sq_dist(u, v))
}

pub fn euclidean(u: &[f64], v: &[f64]) -> Result<f64> {
    euclidean_sq(u, v).map(f64::sqrt)
}

/// Gradient of [`euclidean_sq`] with respect to `u`: `2 (u - v)`.
pub fn euclidean_sq_grad(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim(u.len(), v.len())?;
    let mut g = vec![0.0; u.len()];
    Metric::Squared.grad_into(u, v, &mut g);
    Ok(g)
}

/// Gradient of [`euclidean`] with respect to `u`; zero at `u == v`.
pub fn euclidean_grad(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim(u.len(), v.len())?;
    let mut g = vec![0.0; u.len()];
    Metric::Unsquared.grad_into(u, v, &mut g);
    Ok(g)
}

/// Flat parameters together with the gradient accumulated for them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradTape {
    params: Vec<f64>,
    grad: Vec<f64>,
}

impl GradTape {
    pub fn new(params: Vec<f64>) -> Self {
        let grad = vec![0.0; params.len()];
        Self { params, grad }
    }

    pub fn with_grad(params: Vec<f64>, grad: Vec<f64>) -> Result<Self> {
        check_dim(params.len(), grad.len())?;
        Ok(Self { params, grad })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds `g` into the accumulated gradient.
    pub fn accumulate(&mut self, g: &[f64]) -> Result<()> {
        check_dim(self.grad.len(), g.len())?;
        for (acc, v) in self.grad.iter_mut().zip(g) {
            *acc += v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_error: f64,
    /// Indices whose relative error exceeded the tolerance.
    pub failing: Vec<usize>,
    pub numeric: Vec<f64>,
    pub analytic: Vec<f64>,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Relative error with a unit floor: `|a - n| / max(|a|, |n|, 1)`.
///
/// The floor keeps near-zero gradient entries from turning rounding noise
/// into a huge relative error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares the analytic gradient stored in `tape` against central
/// differences `(L(θ + εe_i) - L(θ - εe_i)) / 2ε` of `loss`.
pub fn finite_diff_check<F>(mut loss: F, tape: &GradTape, step: f64, tol: f64) -> Result<CheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut theta = tape.params.clone();
    let base = loss(&theta);
    if !base.is_finite() {
        return Err(Error::NonFinite {
            context: "loss at the unperturbed parameters".into(),
            value: base,
        });
    }
    let mut numeric = Vec::with_capacity(theta.len());
    let mut failing = Vec::new();
    let mut max_rel_error = 0.0_f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let plus = loss(&theta);
        theta[i] = orig - step;
        let minus = loss(&theta);
        theta[i] = orig;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("loss with parameter {i} perturbed"),
                    value: v,
                });
            }
        }
        let n = (plus - minus) / (2.0 * step);
        let err = relative_error(tape.grad[i], n);
        if err > tol {
            failing.push(i);
        }
        max_rel_error = max_rel_error.max(err);
        numeric.push(n);
    }
    Ok(CheckReport {
        max_rel_error,
        failing,
        numeric,
        analytic: tape.grad.clone(),
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn squared_distance_examples() {
        assert_eq!(euclidean_sq(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(euclidean_sq(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(euclidean_sq(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);
    }

    #[test]
    fn unsquared_distance_examples() {
        assert_eq!(euclidean(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert_eq!(euclidean(&[2.5, -1.0], &[2.5, -1.0]).unwrap(), 0.0);
        let d = euclidean(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((d - 1.414_213_56).abs() < 1e-8);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            euclidean_sq(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 1, actual: 2 })
        ));
        assert!(euclidean(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![]).is_err());
        assert_eq!(Vector::new(vec![1.0, 2.0]).unwrap().dim(), 2);
    }

    #[test]
    fn gradcheck_quadratic_passes() {
        let tape = GradTape::with_grad(vec![3.0], vec![6.0]).unwrap();
        let report = finite_diff_check(|p| p[0] * p[0], &tape, 1e-4, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradcheck_flags_every_wrong_index() {
        let params = vec![1.5, -2.0, 0.7];
        let wrong: Vec<f64> = params.iter().map(|p| 2.0 * 2.0 * p).collect();
        let tape = GradTape::with_grad(params, wrong).unwrap();
        let report = finite_diff_check(|p| p.iter().map(|x| x * x).sum(), &tape, 1e-4, 1e-5).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failing, vec![0, 1, 2]);
    }

    #[test]
    fn gradcheck_reports_non_finite_loss() {
        let tape = GradTape::new(vec![0.0, 1.0]);
        let err = finite_diff_check(|p| if p[1] > 1.0 { f64::INFINITY } else { 0.0 }, &tape, 1e-4, 1e-5)
            .unwrap_err();
        match err {
            Error::NonFinite { context, .. } => assert!(context.contains("parameter 1")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradcheck_rejects_bad_step() {
        let tape = GradTape::new(vec![0.0]);
        assert!(finite_diff_check(|p| p[0], &tape, 0.0, 1e-5).is_err());
    }

    fn vecs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
        )
    }

    proptest! {
        #[test]
        fn squared_is_symmetric_and_nonnegative((u, v, _) in vecs(7)) {
            let a = euclidean_sq(&u, &v).unwrap();
            prop_assert_eq!(a, euclidean_sq(&v, &u).unwrap());
            prop_assert!(a >= 0.0);
            prop_assert_eq!(euclidean_sq(&u, &u).unwrap(), 0.0);
        }

        #[test]
        fn triangle_inequality_holds((u, v, w) in vecs(5)) {
            let uv = euclidean(&u, &v).unwrap();
            let vw = euclidean(&v, &w).unwrap();
            let uw = euclidean(&u, &w).unwrap();
            prop_assert!(uw <= uv + vw + 1e-12);
        }

        #[test]
        fn distance_gradients_match_central_differences((u, v, _) in vecs(6)) {
            prop_assume!(euclidean(&u, &v).unwrap() > 1e-3);
            for metric in [Metric::Squared, Metric::Unsquared] {
                let mut g = vec![0.0; u.len()];
                metric.grad_into(&u, &v, &mut g);
                let tape = GradTape::with_grad(u.clone(), g).unwrap();
                let report = finite_diff_check(|p| metric.eval(p, &v), &tape, 1e-4, 1e-5).unwrap();
                prop_assert!(report.passed(), "{:?} {:?}", metric, report.max_rel_error);
            }
        }
    }
}
