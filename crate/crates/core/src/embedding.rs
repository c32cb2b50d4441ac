//! Per-modality embedding networks: stacks of fully connected layers with
//! optional batch normalization, projecting raw features into the shared
//! metric space.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::metric::Vector;
use crate::nn::{relu_backward, relu_inplace, Activation, BatchNorm, BatchNormCache, Dense, NormMode, Parameterized};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Thermal,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Thermal];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
        }
    }
}

/// Layer layout of an [`EmbeddingNet`].
///
/// `layer_dims = [in, h1, ..., out]` describes `layer_dims.len() - 1` dense
/// layers; `activations` and `batch_norm` have one entry per dense layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub batch_norm: Vec<bool>,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl NetSpec {
    /// `[feature_dim, 64, 32]`: ReLU and batch norm on the hidden layer, a
    /// plain linear output.
    pub fn default_for(feature_dim: usize) -> Self {
        Self::mlp(&[feature_dim, 64, 32])
    }

    /// ReLU + batch norm on every hidden layer, linear output layer.
    pub fn mlp(dims: &[usize]) -> Self {
        let n = dims.len().saturating_sub(1);
        let mut activations = vec![Activation::Relu; n];
        let mut batch_norm = vec![true; n];
        if let Some(last) = activations.last_mut() {
            *last = Activation::None;
        }
        if let Some(last) = batch_norm.last_mut() {
            *last = false;
        }
        Self {
            layer_dims: dims.to_vec(),
            activations,
            batch_norm,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::contract("a net needs at least an input and an output dimension"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::contract("layer dimensions must be positive"));
        }
        let layers = self.layer_dims.len() - 1;
        check_dim(layers, self.activations.len())?;
        check_dim(layers, self.batch_norm.len())?;
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::contract("bn_epsilon must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::contract("bn_momentum must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedLayer {
    pub dense: Dense,
    pub bn: Option<BatchNorm>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    pub spec: NetSpec,
    pub modality: Modality,
    pub layers: Vec<EmbedLayer>,
}

/// Intermediate values of a batch forward pass.
#[derive(Clone, Debug)]
pub struct EmbedCache {
    inputs: Vec<Array2<f64>>,
    bn: Vec<Option<BatchNormCache>>,
    outputs: Vec<Array2<f64>>,
}

impl EmbeddingNet {
    /// Weights `~ N(0, 1/in_dim)`, zero biases, identity batch norm.
    pub fn init(spec: NetSpec, modality: Modality, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| EmbedLayer {
                dense: Dense::init(w[0], w[1], &mut rng),
                bn: spec.batch_norm[k].then(|| BatchNorm::new(w[1], spec.bn_epsilon, spec.bn_momentum)),
                activation: spec.activations[k],
            })
            .collect();
        Ok(Self { spec, modality, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Embeds a batch (one sample per row).
    ///
    /// [`NormMode::Train`] and [`NormMode::Batch`] need at least two rows.
    pub fn forward(&mut self, x: ArrayView2<f64>, mode: NormMode) -> Result<(Array2<f64>, EmbedCache)> {
        let (out, cache) = self.forward_frozen(x, mode)?;
        if mode == NormMode::Train {
            for (layer, c) in self.layers.iter_mut().zip(&cache.bn) {
                if let (Some(bn), Some(c)) = (&mut layer.bn, c) {
                    bn.update_running(c, x.nrows());
                }
            }
        }
        Ok((out, cache))
    }

    /// Forward pass that leaves running statistics untouched; `Train` is
    /// treated as `Batch`.
    pub fn forward_frozen(&self, x: ArrayView2<f64>, mode: NormMode) -> Result<(Array2<f64>, EmbedCache)> {
        check_dim(self.input_dim(), x.ncols())?;
        let mode = if mode == NormMode::Train { NormMode::Batch } else { mode };
        let n = self.layers.len();
        let mut cache = EmbedCache {
            inputs: Vec::with_capacity(n),
            bn: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = layer.dense.forward(h.view());
            let bn_cache = match &layer.bn {
                Some(bn) => {
                    let (out, c) = bn.forward_frozen(z.view(), mode)?;
                    z = out;
                    Some(c)
                }
                None => None,
            };
            if layer.activation == Activation::Relu {
                relu_inplace(&mut z);
            }
            cache.inputs.push(std::mem::replace(&mut h, z.clone()));
            cache.bn.push(bn_cache);
            cache.outputs.push(z);
        }
        Ok((h, cache))
    }

    /// Backpropagates `d_out` (same shape as the forward output), accumulating
    /// parameter gradients; returns the gradient w.r.t. the input batch.
    pub fn backward(&mut self, cache: &EmbedCache, d_out: Array2<f64>) -> Array2<f64> {
        let mut d = d_out;
        for (k, layer) in self.layers.iter_mut().enumerate().rev() {
            if layer.activation == Activation::Relu {
                relu_backward(&cache.outputs[k], &mut d);
            }
            if let (Some(bn), Some(c)) = (&mut layer.bn, &cache.bn[k]) {
                d = bn.backward(c, d.view());
            }
            d = layer.dense.backward(cache.inputs[k].view(), d.view());
        }
        d
    }

    /// Embeds a single feature vector with running batch-norm statistics.
    pub fn embed(&self, features: &[f64]) -> Result<Vector> {
        check_dim(self.input_dim(), features.len())?;
        let x = ArrayView2::from_shape((1, features.len()), features).expect("row vector");
        let (out, _) = self.forward_frozen(x, NormMode::Infer)?;
        Vector::new(out.into_raw_vec_and_offset().0)
    }
}

impl Parameterized for EmbeddingNet {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        for layer in &self.layers {
            layer.dense.visit_params(f);
            if let Some(bn) = &layer.bn {
                bn.visit_params(f);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for layer in &mut self.layers {
            layer.dense.visit_params_mut(f);
            if let Some(bn) = &mut layer.bn {
                bn.visit_params_mut(f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{finite_diff_check, Metric};
    use rand_distr::{Distribution, Normal};

    fn batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
    }

    #[test]
    fn zero_input_propagates_to_zero_without_bias() {
        let spec = NetSpec {
            batch_norm: vec![false, false],
            ..NetSpec::mlp(&[8, 16, 4])
        };
        let net = EmbeddingNet::init(spec, Modality::Rgb, 0).unwrap();
        let out = net.embed(&[0.0; 8]).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = NetSpec::mlp(&[8, 16, 4]);
        let a = EmbeddingNet::init(spec.clone(), Modality::Rgb, 0).unwrap();
        let b = EmbeddingNet::init(spec.clone(), Modality::Rgb, 0).unwrap();
        let c = EmbeddingNet::init(spec, Modality::Rgb, 1).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn identity_layer_returns_input() {
        let spec = NetSpec {
            layer_dims: vec![3, 3],
            activations: vec![Activation::None],
            batch_norm: vec![false],
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
        };
        let mut net = EmbeddingNet::init(spec, Modality::Thermal, 0).unwrap();
        net.layers[0].dense = Dense::identity(3);
        let out = net.embed(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(out.as_slice(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn infer_mode_is_stateless() {
        let net = EmbeddingNet::init(NetSpec::default_for(6), Modality::Rgb, 3).unwrap();
        let x = [0.3, -0.2, 1.0, 0.0, 2.0, -1.5];
        assert_eq!(net.embed(&x).unwrap(), net.embed(&x).unwrap());
    }

    #[test]
    fn train_mode_needs_two_samples() {
        let mut net = EmbeddingNet::init(NetSpec::default_for(4), Modality::Rgb, 3).unwrap();
        let x = batch(1, 4, 0);
        assert!(matches!(net.forward(x.view(), NormMode::Train), Err(Error::Contract(_))));
        let x = batch(2, 5, 0);
        assert!(matches!(net.forward(x.view(), NormMode::Train), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(EmbeddingNet::init(NetSpec::mlp(&[4]), Modality::Rgb, 0).is_err());
        let spec = NetSpec {
            bn_epsilon: 0.0,
            ..NetSpec::mlp(&[4, 2])
        };
        assert!(spec.validate().is_err());
    }

    /// Gradient of `sum_i d(e_anchor, e_i)` over a batch, through batch-norm
    /// batch statistics, against central differences of every parameter.
    fn check_net(spec: NetSpec, seed: u64) {
        let mut net = EmbeddingNet::init(spec.clone(), Modality::Rgb, seed).unwrap();
        // move batch norm off its identity init
        net.visit_params_mut(&mut |p, _| {
            for (i, v) in p.iter_mut().enumerate() {
                *v += 0.05 * ((i as f64 * 0.37 + seed as f64).sin());
            }
        });
        let x = batch(5, spec.input_dim(), seed + 100);
        let loss = |net: &EmbeddingNet| -> (f64, Array2<f64>) {
            let (e, _) = net.forward_frozen(x.view(), NormMode::Batch).unwrap();
            let mut grad = Array2::zeros(e.raw_dim());
            let mut total = 0.0;
            let mut g = vec![0.0; e.ncols()];
            for i in 1..e.nrows() {
                let (a, s) = (e.row(0), e.row(i));
                total += Metric::Squared.eval(a.as_slice().unwrap(), s.as_slice().unwrap());
                Metric::Squared.grad_into(a.as_slice().unwrap(), s.as_slice().unwrap(), &mut g);
                for k in 0..g.len() {
                    grad[[0, k]] += g[k];
                    grad[[i, k]] -= g[k];
                }
            }
            (total, grad)
        };
        let (e, cache) = net.forward_frozen(x.view(), NormMode::Batch).unwrap();
        let _ = e;
        let (_, grad) = loss(&net);
        net.zero_grad();
        net.backward(&cache, grad);
        let tape = net.tape();
        let mut probe = net.clone();
        let report = finite_diff_check(
            |p| {
                probe.load_params(p).unwrap();
                loss(&probe).0
            },
            &tape,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: max rel err {}", report.max_rel_error);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..4 {
            check_net(NetSpec::mlp(&[6, 8, 4]), seed);
            check_net(NetSpec::mlp(&[5, 7, 6, 3]), seed);
        }
        let mut with_final_bn = NetSpec::mlp(&[4, 6, 3]);
        with_final_bn.batch_norm = vec![true, true];
        check_net(with_final_bn, 7);
    }
}
