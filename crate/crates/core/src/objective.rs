//! Metric-learning objectives behind one trait, selectable by name.
//!
//! Every objective sees one frame batch per modality: row 0 is the anchor
//! embedding, rows `1..` are the proposals. It returns the loss breakdown and
//! the gradient w.r.t. both embedding matrices.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fusion::FusionMode;
use crate::losses::{cross_modality_loss_with_grad, mmsl_total, set_losses_from_distances, triplet_from_distances, CrossReading, LossValue, SetLosses};
use crate::metric::Metric;
use crate::mining::{mine_indices, Label, MarginParams, MinedIndices};

/// Embedded batch of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameBatch<'a> {
    pub emb_r: ArrayView2<'a, f64>,
    pub emb_t: ArrayView2<'a, f64>,
    /// One label per proposal row (`rows - 1` entries).
    pub labels: &'a [Label],
    pub params: &'a MarginParams,
    pub metric: Metric,
    pub cross_reading: CrossReading,
}

impl FrameBatch<'_> {
    fn validate(&self) -> Result<()> {
        check_dim(self.labels.len() + 1, self.emb_r.nrows())?;
        check_dim(self.emb_r.nrows(), self.emb_t.nrows())?;
        check_dim(self.emb_r.ncols(), self.emb_t.ncols())?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    /// Breakdown always carries `l_rgb`, `l_t` and `l_cross`.
    pub loss: LossValue,
    pub grad_r: Array2<f64>,
    pub grad_t: Array2<f64>,
    pub mined_r: MinedIndices,
    pub mined_t: MinedIndices,
}

pub trait MetricObjective: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, batch: &FrameBatch) -> Result<ObjectiveOutput>;
}

/// Distances from the anchor row to every proposal row.
pub fn anchor_distances(emb: ArrayView2<f64>, metric: Metric) -> Vec<f64> {
    let anchor = emb.row(0).to_vec();
    (1..emb.nrows())
        .map(|i| metric.eval(&anchor, &emb.row(i).to_vec()))
        .collect()
}

/// Chain rule from per-proposal distance gradients to the embedding rows.
pub fn distance_grad_to_rows(emb: ArrayView2<f64>, g_dist: &[f64], metric: Metric) -> Array2<f64> {
    let mut out = Array2::zeros(emb.raw_dim());
    let anchor = emb.row(0).to_vec();
    let mut buf = vec![0.0; emb.ncols()];
    for (i, &g) in g_dist.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = emb.row(i + 1).to_vec();
        metric.grad_into(&row, &anchor, &mut buf);
        for (k, &b) in buf.iter().enumerate() {
            out[[i + 1, k]] += g * b;
            out[[0, k]] -= g * b;
        }
    }
    out
}

fn split_by_label(d: &[f64], labels: &[Label]) -> (Vec<f64>, Vec<usize>, Vec<f64>, Vec<usize>) {
    let (mut pos, mut pos_idx, mut neg, mut neg_idx) = (vec![], vec![], vec![], vec![]);
    for (i, (&v, l)) in d.iter().zip(labels).enumerate() {
        if l.is_positive() {
            pos.push(v);
            pos_idx.push(i);
        } else {
            neg.push(v);
            neg_idx.push(i);
        }
    }
    (pos, pos_idx, neg, neg_idx)
}

/// The multi-margin objective with switchable parts.
#[derive(Clone, Debug)]
pub struct Mmsl {
    pub name: String,
    pub set_terms: bool,
    pub cross: bool,
}

impl MetricObjective for Mmsl {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(&self, b: &FrameBatch) -> Result<ObjectiveOutput> {
        b.validate()?;
        let d_r = anchor_distances(b.emb_r, b.metric);
        let d_t = anchor_distances(b.emb_t, b.metric);
        let mined_r = mine_indices(&d_r, b.labels, b.params);
        let mined_t = mine_indices(&d_t, b.labels, b.params);
        let (mut set_r, mut g_r) = (SetLosses::default(), vec![0.0; d_r.len()]);
        let (mut set_t, mut g_t) = (SetLosses::default(), vec![0.0; d_t.len()]);
        if self.set_terms {
            (set_r, g_r) = set_losses_from_distances(&d_r, b.labels, &mined_r, b.params);
            (set_t, g_t) = set_losses_from_distances(&d_t, b.labels, &mined_t, b.params);
        }
        let mut cross = 0.0;
        if self.cross {
            let (pos_r, pos_idx, neg_r, neg_idx) = split_by_label(&d_r, b.labels);
            let (pos_t, _, neg_t, _) = split_by_label(&d_t, b.labels);
            if !pos_r.is_empty() && !neg_r.is_empty() {
                let (v, g) = cross_modality_loss_with_grad(&pos_r, &neg_r, &pos_t, &neg_t, b.params.delta, b.cross_reading)?;
                cross = v;
                for (j, &i) in pos_idx.iter().enumerate() {
                    g_r[i] += g.pos_r[j];
                    g_t[i] += g.pos_t[j];
                }
                for (j, &i) in neg_idx.iter().enumerate() {
                    g_r[i] += g.neg_r[j];
                    g_t[i] += g.neg_t[j];
                }
            }
        }
        Ok(ObjectiveOutput {
            loss: mmsl_total(set_r, set_t, cross),
            grad_r: distance_grad_to_rows(b.emb_r, &g_r, b.metric),
            grad_t: distance_grad_to_rows(b.emb_t, &g_t, b.metric),
            mined_r,
            mined_t,
        })
    }
}

/// Anchor-based triplet loss over every (positive, negative) pair of a
/// modality, with margin `m`. Reported under `l_rgb` and `l_t`.
#[derive(Clone, Debug, Default)]
pub struct AnchorTriplet;

impl MetricObjective for AnchorTriplet {
    fn name(&self) -> &str {
        "triplet"
    }

    fn evaluate(&self, b: &FrameBatch) -> Result<ObjectiveOutput> {
        b.validate()?;
        let run = |emb: ArrayView2<f64>| -> (f64, Array2<f64>, MinedIndices) {
            let d = anchor_distances(emb, b.metric);
            let mined = mine_indices(&d, b.labels, b.params);
            let (pos, pos_idx, neg, neg_idx) = split_by_label(&d, b.labels);
            let mut g = vec![0.0; d.len()];
            if pos.is_empty() || neg.is_empty() {
                return (0.0, Array2::zeros(emb.raw_dim()), mined);
            }
            let (v, gp, gn) = triplet_from_distances(&pos, &neg, b.params.m);
            for (j, &i) in pos_idx.iter().enumerate() {
                g[i] = gp[j];
            }
            for (j, &i) in neg_idx.iter().enumerate() {
                g[i] = gn[j];
            }
            (v, distance_grad_to_rows(emb, &g, b.metric), mined)
        };
        let (l_rgb, grad_r, mined_r) = run(b.emb_r);
        let (l_t, grad_t, mined_t) = run(b.emb_t);
        Ok(ObjectiveOutput {
            loss: LossValue {
                value: l_rgb + l_t,
                terms: vec![("l_rgb".into(), l_rgb), ("l_t".into(), l_t), ("l_cross".into(), 0.0)],
            },
            grad_r,
            grad_t,
            mined_r,
            mined_t,
        })
    }
}

/// Lifted-structure loss per modality, anchor and positives forming one class.
#[derive(Clone, Debug, Default)]
pub struct LiftedStruct;

impl MetricObjective for LiftedStruct {
    fn name(&self) -> &str {
        "lifted_struct"
    }

    fn evaluate(&self, b: &FrameBatch) -> Result<ObjectiveOutput> {
        b.validate()?;
        let classes: Vec<usize> = std::iter::once(0)
            .chain(b.labels.iter().map(|l| if l.is_positive() { 0 } else { 1 }))
            .collect();
        // negatives are pushed past the positive boundary
        let beta = b.params.alpha;
        let r = crate::losses::lifted_struct_loss(b.emb_r, &classes, beta, b.metric)?;
        let t = crate::losses::lifted_struct_loss(b.emb_t, &classes, beta, b.metric)?;
        let mined_r = mine_indices(&anchor_distances(b.emb_r, b.metric), b.labels, b.params);
        let mined_t = mine_indices(&anchor_distances(b.emb_t, b.metric), b.labels, b.params);
        Ok(ObjectiveOutput {
            loss: LossValue {
                value: r.loss.value + t.loss.value,
                terms: vec![("l_rgb".into(), r.loss.value), ("l_t".into(), t.loss.value), ("l_cross".into(), 0.0)],
            },
            grad_r: r.grad,
            grad_t: t.grad,
            mined_r,
            mined_t,
        })
    }
}

/// No metric term; the classifier alone trains the embeddings.
#[derive(Clone, Debug, Default)]
pub struct NoMetric;

impl MetricObjective for NoMetric {
    fn name(&self) -> &str {
        "none"
    }

    fn evaluate(&self, b: &FrameBatch) -> Result<ObjectiveOutput> {
        b.validate()?;
        Ok(ObjectiveOutput {
            loss: mmsl_total(SetLosses::default(), SetLosses::default(), 0.0),
            grad_r: Array2::zeros(b.emb_r.raw_dim()),
            grad_t: Array2::zeros(b.emb_t.raw_dim()),
            mined_r: mine_indices(&anchor_distances(b.emb_r, b.metric), b.labels, b.params),
            mined_t: mine_indices(&anchor_distances(b.emb_t, b.metric), b.labels, b.params),
        })
    }
}

type Factory = fn() -> Arc<dyn MetricObjective>;

/// Name to objective constructor.
pub struct ObjectiveRegistry {
    entries: BTreeMap<&'static str, Factory>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        let mut r = Self { entries: BTreeMap::new() };
        r.register("mmsl", || Arc::new(Mmsl { name: "mmsl".into(), set_terms: true, cross: true }));
        r.register("mmsl_no_cross", || {
            Arc::new(Mmsl { name: "mmsl_no_cross".into(), set_terms: true, cross: false })
        });
        r.register("cross_only", || Arc::new(Mmsl { name: "cross_only".into(), set_terms: false, cross: true }));
        r.register("triplet", || Arc::new(AnchorTriplet));
        r.register("lifted_struct", || Arc::new(LiftedStruct));
        r.register("none", || Arc::new(NoMetric));
        r
    }
}

impl ObjectiveRegistry {
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn MetricObjective>> {
        self.entries.get(name).map(|f| f()).ok_or_else(|| Error::Unknown {
            kind: "objective",
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }
}

/// A named ablation setting: which objective and which fusion head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub objective: String,
    pub fusion: FusionMode,
}

pub const VARIANTS: [&str; 5] = ["full", "no_cross", "no_rgbt_terms", "baseline_triplet", "no_attention_fusion"];

pub fn variant(name: &str) -> Result<Variant> {
    let (objective, fusion) = match name {
        "full" => ("mmsl", FusionMode::Attention),
        "no_cross" => ("mmsl_no_cross", FusionMode::Attention),
        "no_rgbt_terms" => ("cross_only", FusionMode::Attention),
        "baseline_triplet" => ("triplet", FusionMode::Attention),
        "no_attention_fusion" => ("mmsl", FusionMode::Concat),
        other => {
            return Err(Error::Unknown {
                kind: "variant",
                name: other.to_string(),
                known: VARIANTS.join(", "),
            })
        }
    };
    Ok(Variant {
        name: name.to_string(),
        objective: objective.to_string(),
        fusion,
    })
}
