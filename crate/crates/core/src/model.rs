//! The full two-modality model and its JSON document.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHead;
use crate::embedding::{EmbedLayer, EmbeddingNet, Modality, NetSpec};
use crate::error::{check_dim, Error, Result};
use crate::fusion::{FusionHead, FusionMode};
use crate::json17;
use crate::nn::{Activation, BatchNorm, Dense, NormMode, Parameterized};

/// Architecture knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of each embedding net; the last entry is the embedding size.
    pub embed_dims: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub fusion: FusionMode,
    /// Identity-initialized linear layer in front of each embedding net,
    /// trained at `lr_feature`. Frozen (absent) by default.
    pub trainable_adapter: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dims: vec![64, 32],
            classifier_hidden: vec![32, 16],
            fusion: FusionMode::Attention,
            trainable_adapter: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerModel {
    pub adapter_r: Option<Dense>,
    pub adapter_t: Option<Dense>,
    pub rgb: EmbeddingNet,
    pub thermal: EmbeddingNet,
    pub fusion: FusionHead,
    pub classifier: ClassifierHead,
}

impl TrackerModel {
    pub fn init(feature_dim: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.embed_dims.is_empty() {
            return Err(Error::Config("embed_dims needs at least one width".into()));
        }
        let mut dims = vec![feature_dim];
        dims.extend(&cfg.embed_dims);
        let spec = NetSpec::mlp(&dims);
        let out = spec.output_dim();
        let mut cls_dims = vec![2 * out];
        cls_dims.extend(&cfg.classifier_hidden);
        cls_dims.push(2);
        let (adapter_r, adapter_t) = if cfg.trainable_adapter {
            (Some(Dense::identity(feature_dim)), Some(Dense::identity(feature_dim)))
        } else {
            (None, None)
        };
        Ok(Self {
            adapter_r,
            adapter_t,
            rgb: EmbeddingNet::init(spec.clone(), Modality::Rgb, seed.wrapping_mul(4).wrapping_add(1))?,
            thermal: EmbeddingNet::init(spec, Modality::Thermal, seed.wrapping_mul(4).wrapping_add(2))?,
            fusion: FusionHead::init(out, cfg.fusion, seed.wrapping_mul(4).wrapping_add(3)),
            classifier: ClassifierHead::init(&cls_dims, seed.wrapping_mul(4).wrapping_add(4))?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.rgb.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.rgb.output_dim()
    }

    pub fn net(&self, modality: Modality) -> &EmbeddingNet {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Thermal => &self.thermal,
        }
    }

    fn adapter(&self, modality: Modality) -> Option<&Dense> {
        match modality {
            Modality::Rgb => self.adapter_r.as_ref(),
            Modality::Thermal => self.adapter_t.as_ref(),
        }
    }

    /// Applies the adapter of `modality`, if any.
    pub fn adapt(&self, modality: Modality, x: ArrayView2<f64>) -> Array2<f64> {
        match self.adapter(modality) {
            Some(a) => a.forward(x),
            None => x.to_owned(),
        }
    }

    /// Embeds a feature batch without touching running statistics.
    pub fn embed_batch(&self, modality: Modality, x: ArrayView2<f64>, mode: NormMode) -> Result<Array2<f64>> {
        let h = self.adapt(modality, x);
        Ok(self.net(modality).forward_frozen(h.view(), mode)?.0)
    }

    /// Positive-class probabilities for rows of raw features.
    pub fn score(&self, x_r: ArrayView2<f64>, x_t: ArrayView2<f64>, mode: NormMode) -> Result<Vec<f64>> {
        let e_r = self.embed_batch(Modality::Rgb, x_r, mode)?;
        let e_t = self.embed_batch(Modality::Thermal, x_t, mode)?;
        let (fused, _) = self.fusion.forward(e_r.view(), e_t.view())?;
        let (logits, _) = self.classifier.forward(fused.view())?;
        Ok(crate::losses::positive_scores(logits.view()))
    }

    /// Number of leading parameters (in visiting order) in the feature tier.
    pub fn feature_tier_len(&self) -> usize {
        self.adapter_r.as_ref().map_or(0, |a| a.num_params()) + self.adapter_t.as_ref().map_or(0, |a| a.num_params())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ModelDoc>(s)?.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Parameterized for TrackerModel {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        for a in [&self.adapter_r, &self.adapter_t].into_iter().flatten() {
            a.visit_params(f);
        }
        self.rgb.visit_params(f);
        self.thermal.visit_params(f);
        self.fusion.visit_params(f);
        self.classifier.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for a in [&mut self.adapter_r, &mut self.adapter_t].into_iter().flatten() {
            a.visit_params_mut(f);
        }
        self.rgb.visit_params_mut(f);
        self.thermal.visit_params_mut(f);
        self.fusion.visit_params_mut(f);
        self.classifier.visit_params_mut(f);
    }
}

pub const MODEL_FORMAT: &str = "mmsl-model/1";

#[derive(Serialize, Deserialize)]
struct DenseDoc {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `in_dim x out_dim`.
    #[serde(serialize_with = "json17::serialize")]
    weight: Vec<f64>,
    #[serde(serialize_with = "json17::serialize")]
    bias: Vec<f64>,
}

impl From<&Dense> for DenseDoc {
    fn from(d: &Dense) -> Self {
        Self {
            in_dim: d.in_dim(),
            out_dim: d.out_dim(),
            weight: d.weight_row_major(),
            bias: d.bias.to_vec(),
        }
    }
}

impl TryFrom<DenseDoc> for Dense {
    type Error = Error;
    fn try_from(d: DenseDoc) -> Result<Self> {
        Dense::from_parts(d.in_dim, d.out_dim, d.weight, d.bias)
    }
}

#[derive(Serialize, Deserialize)]
struct BatchNormDoc {
    #[serde(serialize_with = "json17::scalar::serialize")]
    epsilon: f64,
    #[serde(serialize_with = "json17::scalar::serialize")]
    momentum: f64,
    #[serde(serialize_with = "json17::serialize")]
    scale: Vec<f64>,
    #[serde(serialize_with = "json17::serialize")]
    shift: Vec<f64>,
    #[serde(serialize_with = "json17::serialize")]
    running_mean: Vec<f64>,
    #[serde(serialize_with = "json17::serialize")]
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    dense: DenseDoc,
    activation: Activation,
    batch_norm: Option<BatchNormDoc>,
}

#[derive(Serialize, Deserialize)]
struct NetDoc {
    modality: Modality,
    layer_dims: Vec<usize>,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct FusionDoc {
    mode: FusionMode,
    gate_r: DenseDoc,
    gate_t: DenseDoc,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    adapter_r: Option<DenseDoc>,
    adapter_t: Option<DenseDoc>,
    rgb: NetDoc,
    thermal: NetDoc,
    fusion: FusionDoc,
    classifier: Vec<DenseDoc>,
}

impl From<&EmbeddingNet> for NetDoc {
    fn from(net: &EmbeddingNet) -> Self {
        Self {
            modality: net.modality,
            layer_dims: net.spec.layer_dims.clone(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerDoc {
                    dense: (&l.dense).into(),
                    activation: l.activation,
                    batch_norm: l.bn.as_ref().map(|bn| BatchNormDoc {
                        epsilon: bn.epsilon,
                        momentum: bn.momentum,
                        scale: bn.scale.to_vec(),
                        shift: bn.shift.to_vec(),
                        running_mean: bn.running_mean.to_vec(),
                        running_var: bn.running_var.to_vec(),
                    }),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetDoc> for EmbeddingNet {
    type Error = Error;
    fn try_from(doc: NetDoc) -> Result<Self> {
        let mut layers = Vec::with_capacity(doc.layers.len());
        let (mut eps, mut mom) = (1e-5, 0.1);
        for l in doc.layers {
            let dense: Dense = l.dense.try_into()?;
            let bn = match l.batch_norm {
                Some(b) => {
                    let dim = dense.out_dim();
                    for v in [&b.scale, &b.shift, &b.running_mean, &b.running_var] {
                        check_dim(dim, v.len())?;
                    }
                    if b.running_var.iter().any(|&v| !(v > 0.0)) {
                        return Err(Error::contract("running variance must be positive"));
                    }
                    (eps, mom) = (b.epsilon, b.momentum);
                    let mut bn = BatchNorm::new(dim, b.epsilon, b.momentum);
                    bn.scale = Array1::from(b.scale);
                    bn.shift = Array1::from(b.shift);
                    bn.running_mean = Array1::from(b.running_mean);
                    bn.running_var = Array1::from(b.running_var);
                    Some(bn)
                }
                None => None,
            };
            layers.push(EmbedLayer {
                dense,
                bn,
                activation: l.activation,
            });
        }
        let spec = NetSpec {
            layer_dims: doc.layer_dims,
            activations: layers.iter().map(|l| l.activation).collect(),
            batch_norm: layers.iter().map(|l| l.bn.is_some()).collect(),
            bn_epsilon: eps,
            bn_momentum: mom,
        };
        spec.validate()?;
        for (k, l) in layers.iter().enumerate() {
            check_dim(spec.layer_dims[k], l.dense.in_dim())?;
            check_dim(spec.layer_dims[k + 1], l.dense.out_dim())?;
        }
        Ok(EmbeddingNet {
            spec,
            modality: doc.modality,
            layers,
        })
    }
}

impl From<&TrackerModel> for ModelDoc {
    fn from(m: &TrackerModel) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            adapter_r: m.adapter_r.as_ref().map(Into::into),
            adapter_t: m.adapter_t.as_ref().map(Into::into),
            rgb: (&m.rgb).into(),
            thermal: (&m.thermal).into(),
            fusion: FusionDoc {
                mode: m.fusion.mode,
                gate_r: (&m.fusion.gate_r).into(),
                gate_t: (&m.fusion.gate_t).into(),
            },
            classifier: m.classifier.layers.iter().map(Into::into).collect(),
        }
    }
}

impl TryFrom<ModelDoc> for TrackerModel {
    type Error = Error;
    fn try_from(doc: ModelDoc) -> Result<Self> {
        if doc.format != MODEL_FORMAT {
            return Err(Error::contract(format!("unsupported model format {:?}", doc.format)));
        }
        let rgb: EmbeddingNet = doc.rgb.try_into()?;
        let thermal: EmbeddingNet = doc.thermal.try_into()?;
        let fusion = FusionHead {
            mode: doc.fusion.mode,
            gate_r: doc.fusion.gate_r.try_into()?,
            gate_t: doc.fusion.gate_t.try_into()?,
        };
        let classifier = ClassifierHead {
            layers: doc.classifier.into_iter().map(TryInto::try_into).collect::<Result<_>>()?,
        };
        check_dim(rgb.output_dim(), thermal.output_dim())?;
        check_dim(rgb.output_dim(), fusion.dim())?;
        check_dim(2 * rgb.output_dim(), classifier.input_dim())?;
        Ok(Self {
            adapter_r: doc.adapter_r.map(TryInto::try_into).transpose()?,
            adapter_t: doc.adapter_t.map(TryInto::try_into).transpose()?,
            rgb,
            thermal,
            fusion,
            classifier,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_lossless() {
        for adapter in [false, true] {
            let cfg = ModelConfig {
                trainable_adapter: adapter,
                ..ModelConfig::default()
            };
            let mut m = TrackerModel::init(6, &cfg, 3).unwrap();
            // non-trivial running stats and a value needing all 17 digits
            m.rgb.layers[0].bn.as_mut().unwrap().running_var[0] = 0.1 + 0.2;
            m.thermal.layers[0].bn.as_mut().unwrap().running_mean[1] = -1.0 / 3.0;
            let back = TrackerModel::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_json().unwrap(), m.to_json().unwrap());
        }
    }

    #[test]
    fn rejects_inconsistent_documents() {
        let m = TrackerModel::init(4, &ModelConfig::default(), 1).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["format"] = "other".into();
        assert!(TrackerModel::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["rgb"]["layers"][0]["dense"]["in_dim"] = 5.into();
        assert!(TrackerModel::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn feature_tier_is_empty_without_adapter() {
        let m = TrackerModel::init(4, &ModelConfig::default(), 1).unwrap();
        assert_eq!(m.feature_tier_len(), 0);
        let cfg = ModelConfig {
            trainable_adapter: true,
            ..ModelConfig::default()
        };
        let m = TrackerModel::init(4, &cfg, 1).unwrap();
        assert_eq!(m.feature_tier_len(), 2 * (16 + 4));
    }

    #[test]
    fn scores_are_probabilities() {
        let m = TrackerModel::init(5, &ModelConfig::default(), 2).unwrap();
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 0.1);
        for s in m.score(x.view(), x.view(), NormMode::Infer).unwrap() {
            assert!((0.0..=1.0).contains(&s));
        }
    }
}
