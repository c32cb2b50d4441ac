//! Confusing-sample mining: positives farther than `alpha` from the anchor
//! and negatives closer than `alpha + m`.

use serde::{Deserialize, Serialize};

use crate::embedding::Modality;
use crate::error::{check_dim, Error, Result};
use crate::metric::{Metric, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub embedding: Vector,
    pub label: Label,
    pub modality: Modality,
    pub sample_id: u64,
}

/// Interval geometry shared by mining and the structured losses.
///
/// Confusing positives are driven into `[alpha - beta, alpha]`, confusing
/// negatives into `[alpha + m, alpha + m + beta]`; `delta` is the
/// cross-modality margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    pub alpha: f64,
    pub beta: f64,
    pub m: f64,
    pub delta: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            alpha: 1.6,
            beta: 0.1,
            m: 0.2,
            delta: 0.2,
        }
    }
}

impl MarginParams {
    pub fn new(alpha: f64, beta: f64, m: f64, delta: f64) -> Result<Self> {
        let p = Self { alpha, beta, m, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.m, self.delta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("margin parameters must be finite"));
        }
        if !(self.alpha > 0.0) || self.beta < 0.0 || self.m < 0.0 || self.delta < 0.0 {
            return Err(Error::contract(
                "margins need alpha > 0 and non-negative beta, m, delta",
            ));
        }
        if !(self.alpha > self.beta) {
            return Err(Error::contract("alpha must exceed beta"));
        }
        Ok(())
    }

    /// Target band for confusing positives.
    pub fn positive_band(&self) -> (f64, f64) {
        (self.alpha - self.beta, self.alpha)
    }

    /// Target band for confusing negatives.
    pub fn negative_band(&self) -> (f64, f64) {
        (self.alpha + self.m, self.alpha + self.m + self.beta)
    }

    pub fn is_confusing(&self, d: f64, label: Label) -> bool {
        match label {
            Label::Positive => d > self.alpha,
            Label::Negative => d < self.alpha + self.m,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedSets {
    pub confusing_positives: Vec<u64>,
    pub confusing_negatives: Vec<u64>,
    pub modality: Option<Modality>,
}

impl MinedSets {
    pub fn is_empty(&self) -> bool {
        self.confusing_positives.is_empty() && self.confusing_negatives.is_empty()
    }

    pub fn len(&self) -> usize {
        self.confusing_positives.len() + self.confusing_negatives.len()
    }
}

/// Mines confusing samples against `anchor`. Boundary distances are not
/// confusing; ids keep input order.
pub fn mine(anchor: &[f64], samples: &[LabeledEmbedding], params: &MarginParams, metric: Metric) -> Result<MinedSets> {
    let modality = samples.first().map(|s| s.modality);
    if samples.iter().any(|s| Some(s.modality) != modality) {
        return Err(Error::contract("all mined samples must share one modality"));
    }
    let mut distances = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        check_dim(anchor.len(), s.embedding.dim())?;
        distances.push(metric.eval(anchor, s.embedding.as_slice()));
        labels.push(s.label);
    }
    let idx = mine_indices(&distances, &labels, params);
    Ok(MinedSets {
        confusing_positives: idx.positives.iter().map(|&i| samples[i].sample_id).collect(),
        confusing_negatives: idx.negatives.iter().map(|&i| samples[i].sample_id).collect(),
        modality,
    })
}

/// Positions (not ids) of confusing samples in a distance list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedIndices {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

pub fn mine_indices(distances: &[f64], labels: &[Label], params: &MarginParams) -> MinedIndices {
    let mut out = MinedIndices::default();
    for (i, (&d, &label)) in distances.iter().zip(labels).enumerate() {
        if params.is_confusing(d, label) {
            match label {
                Label::Positive => out.positives.push(i),
                Label::Negative => out.negatives.push(i),
            }
        }
    }
    out
}
