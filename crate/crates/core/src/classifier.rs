//! Binary target/background classifier over fused features.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::nn::{relu_backward, relu_inplace, Dense, Parameterized};

/// Fully connected layers with ReLU between them; the last layer emits the
/// `(positive, negative)` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct ClassifierCache {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl ClassifierHead {
    /// `dims = [in, hidden..., 2]`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || *dims.last().unwrap() != 2 || dims.contains(&0) {
            return Err(Error::contract("classifier dims must be positive and end in 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::init(w[0], w[1], &mut rng)).collect(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ClassifierCache)> {
        check_dim(self.input_dim(), x.ncols())?;
        let mut cache = ClassifierCache {
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(h.view());
            if k < last {
                relu_inplace(&mut z);
            }
            cache.inputs.push(std::mem::replace(&mut h, z.clone()));
            cache.outputs.push(z);
        }
        Ok((h, cache))
    }

    pub fn backward(&mut self, cache: &ClassifierCache, d_logits: Array2<f64>) -> Array2<f64> {
        let mut d = d_logits;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter_mut().enumerate().rev() {
            if k < last {
                relu_backward(&cache.outputs[k], &mut d);
            }
            d = layer.backward(cache.inputs[k].view(), d.view());
        }
        d
    }
}

impl Parameterized for ClassifierHead {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::classification_loss;
    use crate::metric::finite_diff_check;
    use crate::mining::Label;

    #[test]
    fn rejects_bad_dims() {
        assert!(ClassifierHead::init(&[4, 3], 0).is_err());
        assert!(ClassifierHead::init(&[4], 0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_through_head() {
        let mut head = ClassifierHead::init(&[5, 6, 4, 2], 11).unwrap();
        let x = Array2::from_shape_fn((7, 5), |(i, j)| ((i * 5 + j) as f64 * 0.53).sin() * 2.0);
        let labels: Vec<Label> = (0..7)
            .map(|i| if i % 3 == 0 { Label::Positive } else { Label::Negative })
            .collect();
        let (logits, cache) = head.forward(x.view()).unwrap();
        let g = classification_loss(logits.view(), &labels).unwrap();
        head.zero_grad();
        head.backward(&cache, g.grad);
        let tape = head.tape();
        let mut probe = head.clone();
        let r = finite_diff_check(
            |p| {
                probe.load_params(p).unwrap();
                let (l, _) = probe.forward(x.view()).unwrap();
                classification_loss(l.view(), &labels).unwrap().loss.value
            },
            &tape,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "{}", r.max_rel_error);
    }
}
