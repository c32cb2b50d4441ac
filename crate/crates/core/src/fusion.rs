//! Attention-gated fusion of the two modality features.
//!
//! Each modality gets per-feature gates `sigmoid(relu(W d + b))`; the fused
//! feature is `concat(g_r * d_r, g_t * d_t)`.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::metric::Vector;
use crate::nn::{sigmoid, Dense, Parameterized};

/// How the gates are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `sigmoid(relu(W d + b))` with a learned transform per modality.
    #[default]
    Attention,
    /// Parameterless `sigmoid(d)`.
    Sigmoid,
    /// No gating: plain concatenation (gates fixed at 1).
    Concat,
}

impl std::str::FromStr for FusionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(FusionMode::Attention),
            "sigmoid" => Ok(FusionMode::Sigmoid),
            "concat" => Ok(FusionMode::Concat),
            other => Err(crate::Error::Unknown {
                kind: "fusion mode",
                name: other.into(),
                known: "attention, sigmoid, concat".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub mode: FusionMode,
    pub gate_r: Dense,
    pub gate_t: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub components: Vec<f64>,
    pub gates_r: Vec<f64>,
    pub gates_t: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FusionCache {
    inputs: [Array2<f64>; 2],
    pre: [Array2<f64>; 2],
    gates: [Array2<f64>; 2],
}

/// Sigmoid kept strictly inside (0, 1); plain f64 sigmoid saturates to 1.0
/// above about 37.
fn open_gate(v: f64) -> f64 {
    sigmoid(v).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

impl FusionHead {
    pub fn init(dim: usize, mode: FusionMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            mode,
            gate_r: Dense::init(dim, dim, &mut rng),
            gate_t: Dense::init(dim, dim, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.gate_r.in_dim()
    }

    fn gate_batch(&self, gate: &Dense, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        match self.mode {
            FusionMode::Attention => {
                let pre = gate.forward(x);
                let g = pre.mapv(|v| open_gate(v.max(0.0)));
                (pre, g)
            }
            FusionMode::Sigmoid => (x.to_owned(), x.mapv(open_gate)),
            FusionMode::Concat => (x.to_owned(), Array2::ones(x.raw_dim())),
        }
    }

    /// Fuses a batch of per-modality rows into `rows x 2*dim`.
    pub fn forward(&self, d_r: ArrayView2<f64>, d_t: ArrayView2<f64>) -> Result<(Array2<f64>, FusionCache)> {
        check_dim(self.dim(), d_r.ncols())?;
        check_dim(self.dim(), d_t.ncols())?;
        check_dim(d_r.nrows(), d_t.nrows())?;
        let (pre_r, g_r) = self.gate_batch(&self.gate_r, d_r);
        let (pre_t, g_t) = self.gate_batch(&self.gate_t, d_t);
        let mut out = Array2::zeros((d_r.nrows(), 2 * self.dim()));
        out.slice_mut(s![.., ..self.dim()]).assign(&(&g_r * &d_r));
        out.slice_mut(s![.., self.dim()..]).assign(&(&g_t * &d_t));
        Ok((
            out,
            FusionCache {
                inputs: [d_r.to_owned(), d_t.to_owned()],
                pre: [pre_r, pre_t],
                gates: [g_r, g_t],
            },
        ))
    }

    /// Returns gradients w.r.t. both inputs; gate parameter gradients are
    /// accumulated in attention mode.
    pub fn backward(&mut self, cache: &FusionCache, d_out: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let dim = self.dim();
        let mode = self.mode;
        let halves = [d_out.slice(s![.., ..dim]), d_out.slice(s![.., dim..])];
        let mut grads = Vec::with_capacity(2);
        for (k, gate) in [&mut self.gate_r, &mut self.gate_t].into_iter().enumerate() {
            let (x, g, pre, dy) = (&cache.inputs[k], &cache.gates[k], &cache.pre[k], &halves[k]);
            let mut dx = dy * g;
            match mode {
                FusionMode::Concat => {}
                FusionMode::Sigmoid => {
                    dx += &(dy * x * g * &g.mapv(|v| 1.0 - v));
                }
                FusionMode::Attention => {
                    let mut d_pre = dy * x * g * &g.mapv(|v| 1.0 - v);
                    ndarray::Zip::from(&mut d_pre).and(pre).for_each(|d, &p| {
                        if p <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    dx += &gate.backward(x.view(), d_pre.view());
                }
            }
            grads.push(dx);
        }
        let d_t = grads.pop().expect("two modalities");
        let d_r = grads.pop().expect("two modalities");
        (d_r, d_t)
    }

    /// Single-sample fusion.
    pub fn fuse(&self, d_r: &Vector, d_t: &Vector) -> Result<FusedFeature> {
        check_dim(self.dim(), d_r.dim())?;
        check_dim(self.dim(), d_t.dim())?;
        let r = ArrayView2::from_shape((1, d_r.dim()), d_r.as_slice()).expect("row");
        let t = ArrayView2::from_shape((1, d_t.dim()), d_t.as_slice()).expect("row");
        let (out, cache) = self.forward(r, t)?;
        Ok(FusedFeature {
            components: out.row(0).to_vec(),
            gates_r: cache.gates[0].row(0).to_vec(),
            gates_t: cache.gates[1].row(0).to_vec(),
        })
    }

    /// Mean gate value per modality over a batch, a cheap diagnostic of how
    /// much each modality is trusted.
    pub fn mean_gates(cache: &FusionCache) -> (f64, f64) {
        let m = |a: &Array2<f64>| a.mean_axis(Axis(0)).map(|v| v.mean().unwrap_or(0.0)).unwrap_or(0.0);
        (m(&cache.gates[0]), m(&cache.gates[1]))
    }
}

impl Parameterized for FusionHead {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.gate_r.visit_params(f);
        self.gate_t.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.gate_r.visit_params_mut(f);
        self.gate_t.visit_params_mut(f);
    }
}
