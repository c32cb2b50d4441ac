//! Dense and batch-norm layers with hand-written backward passes, shared by
//! the embedding nets, the fusion gates and the classifier.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Visits `(parameters, gradient)` slice pairs in a fixed order.
///
/// The visiting order defines the flat layout used by
/// [`crate::metric::GradTape`] and by the optimizer's momentum buffers.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64]));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p, _| n += p.len());
        n
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |p, _| out.extend_from_slice(p));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |_, g| out.extend_from_slice(g));
        out
    }

    /// Overwrites all parameters from `src`, which must have exactly
    /// [`Parameterized::num_params`] entries.
    fn load_params(&mut self, src: &[f64]) -> Result<()> {
        check_dim(self.num_params(), src.len())?;
        let mut off = 0;
        self.visit_params_mut(&mut |p, _| {
            p.copy_from_slice(&src[off..off + p.len()]);
            off += p.len();
        });
        Ok(())
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, g| g.iter_mut().for_each(|v| *v = 0.0));
    }

    fn tape(&self) -> crate::metric::GradTape {
        crate::metric::GradTape::with_grad(self.flat_params(), self.flat_grads())
            .expect("params and grads share a layout")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    None,
}

/// Fully connected layer `y = x W + b`, with `W` stored `in_dim x out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((in_dim, out_dim)),
            bias: Array1::zeros(out_dim),
            grad_weight: Array2::zeros((in_dim, out_dim)),
            grad_bias: Array1::zeros(out_dim),
        }
    }

    /// Weights drawn from `N(0, 1/in_dim)`, zero bias.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim);
        let normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("positive std");
        layer.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        layer
    }

    pub fn identity(dim: usize) -> Self {
        let mut layer = Self::zeros(dim, dim);
        layer.weight.diag_mut().fill(1.0);
        layer
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_dim(in_dim * out_dim, weight.len())?;
        check_dim(out_dim, bias.len())?;
        let mut layer = Self::zeros(in_dim, out_dim);
        layer.weight = Array2::from_shape_vec((in_dim, out_dim), weight)
            .map_err(|e| Error::contract(e.to_string()))?;
        layer.bias = Array1::from(bias);
        Ok(layer)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        self.grad_weight += &x.t().dot(&dy);
        self.grad_bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    /// Row-major copy of the weight matrix.
    pub fn weight_row_major(&self) -> Vec<f64> {
        self.weight.iter().copied().collect()
    }
}

impl Parameterized for Dense {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(self.weight.as_slice().unwrap(), self.grad_weight.as_slice().unwrap());
        f(self.bias.as_slice().unwrap(), self.grad_bias.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(self.weight.as_slice_mut().unwrap(), self.grad_weight.as_slice_mut().unwrap());
        f(self.bias.as_slice_mut().unwrap(), self.grad_bias.as_slice_mut().unwrap());
    }
}

/// How batch norm picks its normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, running statistics updated by the momentum rule.
    Train,
    /// Batch statistics, running statistics left untouched.
    Batch,
    /// Running statistics only.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub grad_scale: Array1<f64>,
    pub grad_shift: Array1<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Values kept from a batch-norm forward pass for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(dim: usize, epsilon: f64, momentum: f64) -> Self {
        Self {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            grad_scale: Array1::zeros(dim),
            grad_shift: Array1::zeros(dim),
            epsilon,
            momentum,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// Normalizes `z`; in [`NormMode::Train`] also folds the batch statistics
    /// into the running statistics.
    pub fn forward(&mut self, z: ArrayView2<f64>, mode: NormMode) -> Result<(Array2<f64>, BatchNormCache)> {
        let (out, cache) = self.forward_frozen(z, mode)?;
        if mode == NormMode::Train {
            self.update_running(&cache, z.nrows());
        }
        Ok((out, cache))
    }

    /// Momentum update of the running statistics from a batch forward pass.
    pub fn update_running(&mut self, cache: &BatchNormCache, batch_size: usize) {
        if !cache.batch_stats {
            return;
        }
        let n = batch_size as f64;
        // running variance tracks the unbiased estimate
        let unbiased = &cache.batch_var * (n / (n - 1.0));
        self.running_mean = &self.running_mean * (1.0 - self.momentum) + &cache.batch_mean * self.momentum;
        self.running_var = &self.running_var * (1.0 - self.momentum) + unbiased * self.momentum;
    }

    /// Same as [`BatchNorm::forward`] but never touches the running statistics.
    pub fn forward_frozen(&self, z: ArrayView2<f64>, mode: NormMode) -> Result<(Array2<f64>, BatchNormCache)> {
        let batch_stats = mode != NormMode::Infer;
        let (mean, var) = if batch_stats {
            let n = z.nrows();
            if n < 2 {
                return Err(Error::contract(format!(
                    "batch norm needs a batch of at least 2 samples for batch statistics, got {n}"
                )));
            }
            (z.mean_axis(Axis(0)).expect("non-empty batch"), z.var_axis(Axis(0), 0.0))
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.epsilon).sqrt());
        let normalized = (&z - &mean) * &inv_std;
        let out = &normalized * &self.scale + &self.shift;
        Ok((
            out,
            BatchNormCache {
                normalized,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                batch_stats,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        self.grad_scale += &(&dy * &cache.normalized).sum_axis(Axis(0));
        self.grad_shift += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.scale;
        if !cache.batch_stats {
            return dxhat * &cache.inv_std;
        }
        let n = dy.nrows() as f64;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.normalized).sum_axis(Axis(0));
        let mut dz = dxhat * n - &sum_dxhat - &(&cache.normalized * &sum_dxhat_xhat);
        dz *= &(&cache.inv_std / n);
        dz
    }
}

impl Parameterized for BatchNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(self.scale.as_slice().unwrap(), self.grad_scale.as_slice().unwrap());
        f(self.shift.as_slice().unwrap(), self.grad_shift.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(self.scale.as_slice_mut().unwrap(), self.grad_scale.as_slice_mut().unwrap());
        f(self.shift.as_slice_mut().unwrap(), self.grad_shift.as_slice_mut().unwrap());
    }
}

pub(crate) fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` wherever the forward output was not positive.
pub(crate) fn relu_backward(out: &Array2<f64>, dy: &mut Array2<f64>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
