//! Joint optimization of the embedding nets, fusion head and classifier.

use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::losses::{classification_loss, CrossReading};
use crate::metric::Metric;
use crate::mining::{Label, MarginParams, MinedIndices};
use crate::model::{ModelConfig, TrackerModel};
use crate::nn::{NormMode, Parameterized};
use crate::objective::{anchor_distances, FrameBatch, MetricObjective, ObjectiveOutput, ObjectiveRegistry};
use crate::synth::{Dataset, DatasetFrame, ProposalLabel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub m: f64,
    pub delta: f64,
    pub lr_feature: f64,
    pub lr_fc: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub distance: Metric,
    pub cross_reading: CrossReading,
    pub w_mmsl: f64,
    pub w_cls: f64,
    /// Registered objective name.
    pub objective: String,
    /// Epoch at whose start the reference snapshot is taken; the last epoch when absent.
    pub reference_epoch: Option<usize>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let margin = MarginParams::default();
        Self {
            alpha: margin.alpha,
            beta: margin.beta,
            m: margin.m,
            delta: margin.delta,
            lr_feature: 1e-4,
            lr_fc: 1e-3,
            momentum: 0.9,
            epochs: 30,
            n_pos: 64,
            n_neg: 196,
            seed: 0,
            distance: Metric::Squared,
            cross_reading: CrossReading::Worst,
            w_mmsl: 1.0,
            w_cls: 1.0,
            objective: "mmsl".into(),
            reference_epoch: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn margin(&self) -> Result<MarginParams> {
        MarginParams::new(self.alpha, self.beta, self.m, self.delta)
    }

    pub fn validate(&self) -> Result<()> {
        self.margin()?;
        if !(self.lr_feature >= 0.0 && self.lr_fc >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.w_mmsl >= 0.0 && self.w_cls >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<Arc<dyn MetricObjective>> {
        ObjectiveRegistry::default().get(&self.objective)
    }
}

/// Raw inputs of one frame: row 0 is the anchor (ground-truth box).
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFrame {
    pub sequence: usize,
    pub index: usize,
    pub x_r: Array2<f64>,
    pub x_t: Array2<f64>,
    pub labels: Vec<Label>,
}

impl PreparedFrame {
    /// Keeps the first `n_pos` positives and `n_neg` negatives in stored order.
    pub fn from_frame(f: &DatasetFrame, n_pos: usize, n_neg: usize) -> Result<Self> {
        let (mut pos, mut neg) = (0, 0);
        let mut rows_r = vec![f.anchor_features(Modality::Rgb).into_inner()];
        let mut rows_t = vec![f.anchor_features(Modality::Thermal).into_inner()];
        let mut labels = Vec::new();
        for p in &f.proposals {
            let keep = match p.proposal.label {
                ProposalLabel::Positive if pos < n_pos => {
                    pos += 1;
                    true
                }
                ProposalLabel::Negative if neg < n_neg => {
                    neg += 1;
                    true
                }
                _ => false,
            };
            if keep {
                rows_r.push(p.features_r.as_slice().to_vec());
                rows_t.push(p.features_t.as_slice().to_vec());
                labels.push(p.proposal.label.as_label().expect("kept proposals are labeled"));
            }
        }
        if labels.is_empty() {
            return Err(Error::contract(format!(
                "frame {}/{} has no labeled proposals",
                f.frame.sequence, f.frame.index
            )));
        }
        let stack = |rows: Vec<Vec<f64>>| {
            let d = rows[0].len();
            Array2::from_shape_vec((rows.len(), d), rows.concat()).map_err(|e| Error::contract(e.to_string()))
        };
        Ok(Self {
            sequence: f.frame.sequence,
            index: f.frame.index,
            x_r: stack(rows_r)?,
            x_t: stack(rows_t)?,
            labels,
        })
    }
}

/// Classic momentum SGD: `v <- mu v - lr g; theta <- theta + v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// The first `feature_len` parameters use `lr_feature`, the rest `lr_fc`.
    pub fn step(&mut self, model: &mut dyn Parameterized, feature_len: usize, lr_feature: f64, lr_fc: f64) {
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; model.num_params()];
        }
        let (mu, vel) = (self.momentum, &mut self.velocity);
        let mut off = 0;
        model.visit_params_mut(&mut |p, g| {
            for k in 0..p.len() {
                let i = off + k;
                let lr = if i < feature_len { lr_feature } else { lr_fc };
                vel[i] = mu * vel[i] - lr * g[k];
                p[k] += vel[i];
            }
            off += p.len();
        });
    }
}

/// One row of the training history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub sequence: usize,
    pub frame: usize,
    pub l_rgb: f64,
    pub l_t: f64,
    pub l_cross: f64,
    pub l_cls: f64,
    /// `w_mmsl * (l_rgb + l_t + l_cross) + w_cls * l_cls`.
    pub total: f64,
    pub w_mmsl: f64,
    pub w_cls: f64,
    pub mined_pos_r: usize,
    pub mined_neg_r: usize,
    pub mined_pos_t: usize,
    pub mined_neg_t: usize,
    /// Fraction of positives with distance in `[alpha - beta, alpha]`, both modalities.
    pub band_pos: f64,
    /// Fraction of negatives with distance in `[alpha + m, alpha + m + beta]`.
    pub band_neg: f64,
}

impl StepRecord {
    pub fn mined(&self) -> usize {
        self.mined_pos_r + self.mined_neg_r + self.mined_pos_t + self.mined_neg_t
    }

    pub fn resum(&self) -> f64 {
        self.w_mmsl * (self.l_rgb + self.l_t + self.l_cross) + self.w_cls * self.l_cls
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.steps {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let steps = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { steps })
    }
}

/// Loss values of one batch without any update.
#[derive(Clone, Debug)]
pub struct BatchEval {
    pub objective: ObjectiveOutput,
    pub l_cls: f64,
    pub total: f64,
}

fn fraction_in(d: &[f64], labels: &[Label], want: Label, band: (f64, f64)) -> (usize, usize) {
    let mut hit = 0;
    let mut n = 0;
    for (&v, &l) in d.iter().zip(labels) {
        if l == want {
            n += 1;
            if v >= band.0 && v <= band.1 {
                hit += 1;
            }
        }
    }
    (hit, n)
}

fn ratio(a: (usize, usize), b: (usize, usize)) -> f64 {
    let n = a.1 + b.1;
    if n == 0 {
        0.0
    } else {
        (a.0 + b.0) as f64 / n as f64
    }
}

/// Evaluates all losses on `frame` with batch statistics, leaving the model untouched.
pub fn evaluate_batch(model: &TrackerModel, frame: &PreparedFrame, cfg: &TrainConfig, objective: &dyn MetricObjective) -> Result<BatchEval> {
    let params = cfg.margin()?;
    let e_r = model.embed_batch(Modality::Rgb, frame.x_r.view(), NormMode::Batch)?;
    let e_t = model.embed_batch(Modality::Thermal, frame.x_t.view(), NormMode::Batch)?;
    let out = objective.evaluate(&FrameBatch {
        emb_r: e_r.view(),
        emb_t: e_t.view(),
        labels: &frame.labels,
        params: &params,
        metric: cfg.distance,
        cross_reading: cfg.cross_reading,
    })?;
    let (fused, _) = model.fusion.forward(e_r.slice(s![1.., ..]), e_t.slice(s![1.., ..]))?;
    let (logits, _) = model.classifier.forward(fused.view())?;
    let l_cls = classification_loss(logits.view(), &frame.labels)?.loss.value;
    let total = cfg.w_mmsl * out.loss.value + cfg.w_cls * l_cls;
    Ok(BatchEval {
        objective: out,
        l_cls,
        total,
    })
}

fn check_finite(context: impl FnOnce() -> String, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context(),
            value,
        })
    }
}

/// Accumulates gradients of the full loss on `frame` into `model` and returns
/// the record (without step/epoch bookkeeping). Running statistics update.
pub fn accumulate_gradients(
    model: &mut TrackerModel,
    frame: &PreparedFrame,
    cfg: &TrainConfig,
    objective: &dyn MetricObjective,
) -> Result<StepRecord> {
    let params = cfg.margin()?;
    let h_r = model.adapt(Modality::Rgb, frame.x_r.view());
    let h_t = model.adapt(Modality::Thermal, frame.x_t.view());
    let (e_r, cache_r) = model.rgb.forward(h_r.view(), NormMode::Train)?;
    let (e_t, cache_t) = model.thermal.forward(h_t.view(), NormMode::Train)?;

    let out = objective.evaluate(&FrameBatch {
        emb_r: e_r.view(),
        emb_t: e_t.view(),
        labels: &frame.labels,
        params: &params,
        metric: cfg.distance,
        cross_reading: cfg.cross_reading,
    })?;

    let (fused, fcache) = model.fusion.forward(e_r.slice(s![1.., ..]), e_t.slice(s![1.., ..]))?;
    let (logits, ccache) = model.classifier.forward(fused.view())?;
    let cls = classification_loss(logits.view(), &frame.labels)?;

    let l = |k: &str| out.loss.term(k).unwrap_or(0.0);
    let mut rec = StepRecord {
        sequence: frame.sequence,
        frame: frame.index,
        l_rgb: l("l_rgb"),
        l_t: l("l_t"),
        l_cross: l("l_cross"),
        l_cls: cls.loss.value,
        w_mmsl: cfg.w_mmsl,
        w_cls: cfg.w_cls,
        mined_pos_r: out.mined_r.positives.len(),
        mined_neg_r: out.mined_r.negatives.len(),
        mined_pos_t: out.mined_t.positives.len(),
        mined_neg_t: out.mined_t.negatives.len(),
        ..StepRecord::default()
    };
    rec.total = rec.resum();
    check_finite(|| format!("loss at sequence {} frame {}", frame.sequence, frame.index), rec.total)?;

    let d_r = anchor_distances(e_r.view(), cfg.distance);
    let d_t = anchor_distances(e_t.view(), cfg.distance);
    let (pb, nb) = (params.positive_band(), params.negative_band());
    rec.band_pos = ratio(
        fraction_in(&d_r, &frame.labels, Label::Positive, pb),
        fraction_in(&d_t, &frame.labels, Label::Positive, pb),
    );
    rec.band_neg = ratio(
        fraction_in(&d_r, &frame.labels, Label::Negative, nb),
        fraction_in(&d_t, &frame.labels, Label::Negative, nb),
    );

    let d_logits = cls.grad * cfg.w_cls;
    let d_fused = model.classifier.backward(&ccache, d_logits);
    let (dp_r, dp_t) = model.fusion.backward(&fcache, d_fused.view());
    let mut g_r = out.grad_r * cfg.w_mmsl;
    let mut g_t = out.grad_t * cfg.w_mmsl;
    g_r.slice_mut(s![1.., ..]).scaled_add(1.0, &dp_r);
    g_t.slice_mut(s![1.., ..]).scaled_add(1.0, &dp_t);
    let dh_r = model.rgb.backward(&cache_r, g_r);
    let dh_t = model.thermal.backward(&cache_t, g_t);
    if let Some(a) = &mut model.adapter_r {
        a.backward(frame.x_r.view(), dh_r.view());
    }
    if let Some(a) = &mut model.adapter_t {
        a.backward(frame.x_t.view(), dh_t.view());
    }
    Ok(rec)
}

/// One optimization step on one frame.
pub fn train_step(
    model: &mut TrackerModel,
    opt: &mut Sgd,
    frame: &PreparedFrame,
    cfg: &TrainConfig,
    objective: &dyn MetricObjective,
) -> Result<StepRecord> {
    model.zero_grad();
    let rec = accumulate_gradients(model, frame, cfg, objective)?;
    let grad_norm: f64 = model.flat_grads().iter().map(|g| g * g).sum();
    check_finite(|| format!("gradient at sequence {} frame {}", frame.sequence, frame.index), grad_norm)?;
    let tier = model.feature_tier_len();
    opt.step(model, tier, cfg.lr_feature, cfg.lr_fc);
    Ok(rec)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrackerModel,
    /// Snapshot taken at the start of the final epoch; structure metrics
    /// mine against it to find the samples that were confusing late in training.
    pub reference: TrackerModel,
    pub history: TrainHistory,
}

pub fn prepare_frames(frames: &[&DatasetFrame], cfg: &TrainConfig) -> Result<Vec<PreparedFrame>> {
    frames.iter().map(|f| PreparedFrame::from_frame(f, cfg.n_pos, cfg.n_neg)).collect()
}

/// Trains on the non-held-out frames of `dataset`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let frames = prepare_frames(&dataset.train_frames(), cfg)?;
    train_prepared(cfg, &frames)
}

pub fn train_prepared(cfg: &TrainConfig, frames: &[PreparedFrame]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = frames.first().ok_or_else(|| Error::contract("training needs at least one frame"))?;
    let objective = cfg.objective()?;
    let mut model = TrackerModel::init(first.x_r.len_of(Axis(1)), &cfg.model, cfg.seed)?;
    let mut opt = Sgd::new(cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696E);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut history = TrainHistory::default();
    let mut reference = model.clone();
    for epoch in 0..cfg.epochs {
        if epoch == cfg.reference_epoch.unwrap_or(cfg.epochs - 1).min(cfg.epochs - 1) {
            reference = model.clone();
        }
        order.shuffle(&mut rng);
        for &i in &order {
            let mut rec = train_step(&mut model, &mut opt, &frames[i], cfg, objective.as_ref())?;
            rec.step = history.steps.len();
            rec.epoch = epoch;
            history.steps.push(rec);
        }
    }
    Ok(TrainOutcome {
        model,
        reference,
        history,
    })
}

/// Mined indices of one frame under `model`, both modalities, batch statistics.
pub fn mine_frame(model: &TrackerModel, frame: &PreparedFrame, params: &MarginParams, metric: Metric) -> Result<[MinedIndices; 2]> {
    let mut out = Vec::with_capacity(2);
    for (m, x) in [(Modality::Rgb, &frame.x_r), (Modality::Thermal, &frame.x_t)] {
        let e = model.embed_batch(m, x.view(), NormMode::Batch)?;
        out.push(crate::mining::mine_indices(&anchor_distances(e.view(), metric), &frame.labels, params));
    }
    let t = out.pop().expect("two");
    let r = out.pop().expect("two");
    Ok([r, t])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DataConfig;

    fn tiny() -> (TrainConfig, Dataset) {
        let data = DataConfig {
            sequences: 2,
            frames: 4,
            holdout_frames: 1,
            feature_dim: 6,
            ..DataConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            n_pos: 4,
            n_neg: 8,
            model: ModelConfig {
                embed_dims: vec![8, 4],
                classifier_hidden: vec![6],
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let ds = Dataset::generate(&data, cfg.n_pos, cfg.n_neg, 5).unwrap();
        (cfg, ds)
    }

    #[test]
    fn history_has_one_row_per_step_and_resums() {
        let (cfg, ds) = tiny();
        let out = train(&cfg, &ds).unwrap();
        assert_eq!(out.history.steps.len(), 2 * 6);
        for r in &out.history.steps {
            assert!((r.resum() - r.total).abs() <= 1e-12);
        }
    }

    #[test]
    fn history_csv_round_trips() {
        let (cfg, ds) = tiny();
        let h = train(&cfg, &ds).unwrap().history;
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(TrainHistory::read_csv(buf.as_slice()).unwrap(), h);
    }

    #[test]
    fn zero_epochs_rejected() {
        let (mut cfg, ds) = tiny();
        cfg.epochs = 0;
        assert!(matches!(train(&cfg, &ds), Err(Error::Config(_))));
    }
}
