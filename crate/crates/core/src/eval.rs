//! Toy tracking, tracking metrics, embedding-structure metrics, ablations
//! and sweeps.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::metric::Metric;
use crate::mining::{mine_indices, Label, MarginParams, MinedIndices};
use crate::model::TrackerModel;
use crate::nn::NormMode;
use crate::objective::{anchor_distances, variant};
use crate::synth::{feature_oracle, iou, BBox, Dataset, Frame, Spread};
use crate::train::{prepare_frames, train_prepared, PreparedFrame, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_candidates: usize,
    /// Center-error threshold as a fraction of the ground-truth diagonal.
    pub pr_threshold: f64,
    pub spread_position: f64,
    pub spread_log_scale: f64,
    /// Slack around the bands and the margin in structure metrics.
    pub epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_candidates: 256,
            pr_threshold: 0.2,
            spread_position: 0.3,
            spread_log_scale: 0.15,
            epsilon: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::Config("n_candidates must be at least 1".into()));
        }
        if !(self.pr_threshold > 0.0 && self.epsilon >= 0.0) {
            return Err(Error::Config("pr_threshold must be positive and epsilon non-negative".into()));
        }
        Ok(())
    }
}

/// Samples candidates around `previous` and returns the one with the highest
/// positive score; ties go to the lowest index.
pub fn track_frame(model: &TrackerModel, previous: &BBox, frame: &Frame, cfg: &EvalConfig, seed: u64) -> Result<BBox> {
    let spread = Spread::relative(previous, cfg.spread_position, cfg.spread_log_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<BBox> = (0..cfg.n_candidates.max(1)).map(|_| spread.sample(previous, &mut rng)).collect();
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let d = model.feature_dim();
    let feats = |m: Modality| {
        let flat: Vec<f64> = candidates.iter().flat_map(|b| feature_oracle(b, frame, m).into_inner()).collect();
        Array2::from_shape_vec((candidates.len(), d), flat).map_err(|e| Error::contract(e.to_string()))
    };
    let scores = model.score(feats(Modality::Rgb)?.view(), feats(Modality::Thermal)?.view(), NormMode::Infer)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(candidates[best])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackedFrame {
    pub sequence: usize,
    pub frame: usize,
    pub chosen: BBox,
    pub ground_truth: BBox,
    pub center_error: f64,
    pub overlap: f64,
}

/// Tracks `frames[1..]` starting from the ground truth of `frames[0]`.
pub fn track_sequence(model: &TrackerModel, frames: &[&Frame], cfg: &EvalConfig, seed: u64) -> Result<Vec<TrackedFrame>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let mut prev = first.ground_truth;
    let mut out = Vec::with_capacity(frames.len().saturating_sub(1));
    for (k, f) in frames.iter().enumerate().skip(1) {
        let chosen = track_frame(model, &prev, f, cfg, seed.wrapping_mul(1_000_003).wrapping_add(k as u64))?;
        out.push(TrackedFrame {
            sequence: f.sequence,
            frame: f.index,
            chosen,
            ground_truth: f.ground_truth,
            center_error: chosen.center_distance(&f.ground_truth),
            overlap: iou(&chosen, &f.ground_truth),
        });
        prev = chosen;
    }
    Ok(out)
}

/// Fraction of frames whose center error is at most `threshold`.
pub fn precision_rate(track: &[(BBox, BBox)], threshold: f64) -> Result<f64> {
    if track.is_empty() {
        return Err(Error::contract("precision rate of an empty track"));
    }
    let hits = track.iter().filter(|(c, g)| c.center_distance(g) <= threshold).count();
    Ok(hits as f64 / track.len() as f64)
}

/// Precision with a per-frame threshold of `fraction` times the ground-truth diagonal.
pub fn relative_precision_rate(track: &[(BBox, BBox)], fraction: f64) -> Result<f64> {
    if track.is_empty() {
        return Err(Error::contract("precision rate of an empty track"));
    }
    let hits = track
        .iter()
        .filter(|(c, g)| c.center_distance(g) <= fraction * g.diagonal())
        .count();
    Ok(hits as f64 / track.len() as f64)
}

/// `{0.0, 0.05, ..., 1.0}`.
pub fn default_overlap_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Mean over `thresholds` of the fraction of frames with overlap strictly
/// above the threshold.
pub fn success_rate(track: &[(BBox, BBox)], thresholds: &[f64]) -> Result<f64> {
    if track.is_empty() {
        return Err(Error::contract("success rate of an empty track"));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::contract("overlap thresholds must be a non-empty subset of [0, 1]"));
    }
    let overlaps: Vec<f64> = track.iter().map(|(c, g)| iou(c, g)).collect();
    let curve: f64 = thresholds
        .iter()
        .map(|&t| overlaps.iter().filter(|&&o| o > t).count() as f64 / overlaps.len() as f64)
        .sum();
    Ok(curve / thresholds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub frames: Vec<TrackedFrame>,
    pub precision_rate: f64,
    pub success_rate: f64,
}

/// Tracks every held-out segment of `dataset`.
pub fn track_dataset(model: &TrackerModel, dataset: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<TrackReport> {
    let mut frames = Vec::new();
    for seq in dataset.holdout_sequences() {
        let fs: Vec<&Frame> = seq.iter().map(|f| &f.frame).collect();
        let id = fs.first().map_or(0, |f| f.sequence) as u64;
        frames.extend(track_sequence(model, &fs, cfg, seed ^ id.wrapping_mul(0x9E37_79B9))?);
    }
    let pairs: Vec<(BBox, BBox)> = frames.iter().map(|f| (f.chosen, f.ground_truth)).collect();
    Ok(TrackReport {
        precision_rate: relative_precision_rate(&pairs, cfg.pr_threshold)?,
        success_rate: success_rate(&pairs, &default_overlap_grid())?,
        frames,
    })
}

impl TrackReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            sequence: usize,
            frame: usize,
            chosen_cx: f64,
            chosen_cy: f64,
            chosen_w: f64,
            chosen_h: f64,
            gt_cx: f64,
            gt_cy: f64,
            gt_w: f64,
            gt_h: f64,
            center_error: f64,
            overlap: f64,
        }
        let mut out = csv::Writer::from_writer(w);
        for f in &self.frames {
            out.serialize(Row {
                sequence: f.sequence,
                frame: f.frame,
                chosen_cx: f.chosen.cx,
                chosen_cy: f.chosen.cy,
                chosen_w: f.chosen.w,
                chosen_h: f.chosen.h,
                gt_cx: f.ground_truth.cx,
                gt_cy: f.ground_truth.cy,
                gt_w: f.ground_truth.w,
                gt_h: f.ground_truth.h,
                center_error: f.center_error,
                overlap: f.overlap,
            })?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Anchor distances of one frame under a final model, with the sets mined
/// under a reference model.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDistances {
    pub labels: Vec<Label>,
    pub d_r: Vec<f64>,
    pub d_t: Vec<f64>,
    pub mined_r: MinedIndices,
    pub mined_t: MinedIndices,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub band_occupancy_pos: f64,
    pub band_occupancy_neg: f64,
    pub margin_satisfaction: f64,
    pub cross_modal_satisfaction: f64,
    pub mined_pos: usize,
    pub mined_neg: usize,
    /// Mined samples that ended below / above their widened band.
    pub pos_below: usize,
    pub pos_above: usize,
    pub neg_below: usize,
    pub neg_above: usize,
    pub anchors: usize,
    pub mean_pos_distance: f64,
    pub mean_neg_distance: f64,
    pub max_pos_distance: f64,
    pub min_neg_distance: f64,
}

fn frac(hits: usize, n: usize) -> f64 {
    // nothing to check counts as satisfied; the counts are reported alongside
    if n == 0 {
        1.0
    } else {
        hits as f64 / n as f64
    }
}

/// Aggregates structure metrics; `epsilon` widens the bands and relaxes the margin.
pub fn summarize_structure(frames: &[FrameDistances], params: &MarginParams, epsilon: f64) -> StructureReport {
    let (plo, phi) = params.positive_band();
    let (nlo, nhi) = params.negative_band();
    let mut r = StructureReport {
        max_pos_distance: f64::NEG_INFINITY,
        min_neg_distance: f64::INFINITY,
        ..StructureReport::default()
    };
    let (mut pos_hits, mut neg_hits, mut margin_hits, mut cross_hits, mut cross_n) = (0, 0, 0, 0, 0);
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for f in frames {
        let mut extremes = Vec::with_capacity(2);
        for (d, mined) in [(&f.d_r, &f.mined_r), (&f.d_t, &f.mined_t)] {
            for &i in &mined.positives {
                r.mined_pos += 1;
                if d[i] < plo - epsilon {
                    r.pos_below += 1;
                } else if d[i] > phi + epsilon {
                    r.pos_above += 1;
                } else {
                    pos_hits += 1;
                }
            }
            for &i in &mined.negatives {
                r.mined_neg += 1;
                if d[i] < nlo - epsilon {
                    r.neg_below += 1;
                } else if d[i] > nhi + epsilon {
                    r.neg_above += 1;
                } else {
                    neg_hits += 1;
                }
            }
            let (mut max_pos, mut min_neg) = (f64::NEG_INFINITY, f64::INFINITY);
            for (&v, l) in d.iter().zip(&f.labels) {
                if l.is_positive() {
                    max_pos = max_pos.max(v);
                    pos_sum += v;
                    pos_n += 1;
                } else {
                    min_neg = min_neg.min(v);
                    neg_sum += v;
                    neg_n += 1;
                }
            }
            if max_pos.is_finite() && min_neg.is_finite() {
                r.anchors += 1;
                if min_neg - max_pos >= params.m - epsilon {
                    margin_hits += 1;
                }
            }
            r.max_pos_distance = r.max_pos_distance.max(max_pos);
            r.min_neg_distance = r.min_neg_distance.min(min_neg);
            extremes.push((max_pos, min_neg));
        }
        let ((pos_r, neg_r), (pos_t, neg_t)) = (extremes[0], extremes[1]);
        if pos_r.is_finite() && neg_r.is_finite() {
            for (p, n) in [(pos_r, neg_t), (pos_t, neg_r)] {
                cross_n += 1;
                if p - n + params.delta <= 0.0 {
                    cross_hits += 1;
                }
            }
        }
    }
    r.band_occupancy_pos = frac(pos_hits, r.mined_pos);
    r.band_occupancy_neg = frac(neg_hits, r.mined_neg);
    r.margin_satisfaction = frac(margin_hits, r.anchors);
    r.cross_modal_satisfaction = frac(cross_hits, cross_n);
    r.mean_pos_distance = if pos_n > 0 { pos_sum / pos_n as f64 } else { 0.0 };
    r.mean_neg_distance = if neg_n > 0 { neg_sum / neg_n as f64 } else { 0.0 };
    r
}

/// Distances under `model`, mined sets under `reference`; both embed each
/// frame with its own batch statistics.
pub fn frame_distances(
    model: &TrackerModel,
    reference: &TrackerModel,
    frames: &[PreparedFrame],
    params: &MarginParams,
    metric: Metric,
) -> Result<Vec<FrameDistances>> {
    frames
        .iter()
        .map(|f| {
            let dist = |m: &TrackerModel, modality: Modality, x: &Array2<f64>| -> Result<Vec<f64>> {
                let e = m.embed_batch(modality, x.view(), NormMode::Batch)?;
                Ok(anchor_distances(e.view(), metric))
            };
            let d_r = dist(model, Modality::Rgb, &f.x_r)?;
            let d_t = dist(model, Modality::Thermal, &f.x_t)?;
            let (mined_r, mined_t) = if std::ptr::eq(model, reference) {
                (mine_indices(&d_r, &f.labels, params), mine_indices(&d_t, &f.labels, params))
            } else {
                (
                    mine_indices(&dist(reference, Modality::Rgb, &f.x_r)?, &f.labels, params),
                    mine_indices(&dist(reference, Modality::Thermal, &f.x_t)?, &f.labels, params),
                )
            };
            Ok(FrameDistances {
                labels: f.labels.clone(),
                d_r,
                d_t,
                mined_r,
                mined_t,
            })
        })
        .collect()
}

pub fn structure_report(
    model: &TrackerModel,
    reference: &TrackerModel,
    frames: &[PreparedFrame],
    params: &MarginParams,
    metric: Metric,
    epsilon: f64,
) -> Result<StructureReport> {
    Ok(summarize_structure(&frame_distances(model, reference, frames, params, metric)?, params, epsilon))
}

/// Structure on the training frames (bands) and on held-out frames (separation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStructure {
    pub train: StructureReport,
    pub holdout: StructureReport,
}

/// One trained run's summary; a row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    /// Empty for mean rows.
    pub seed: Option<u64>,
    pub precision_rate: f64,
    pub success_rate: f64,
    pub band_occupancy_pos: f64,
    pub band_occupancy_neg: f64,
    pub margin_satisfaction: f64,
    pub cross_modal_satisfaction: f64,
    /// Mean mined-set size over the first and last 10% of steps.
    pub mined_early: f64,
    pub mined_late: f64,
}

/// Everything produced by one training run plus its evaluation.
pub struct RunArtifacts {
    pub outcome: TrainOutcome,
    pub structure: SplitStructure,
    pub track: TrackReport,
    pub summary: RunSummary,
}

fn mined_window(outcome: &TrainOutcome, late: bool) -> f64 {
    let steps = &outcome.history.steps;
    let k = (steps.len() / 10).max(1).min(steps.len());
    let window = if late { &steps[steps.len() - k..] } else { &steps[..k] };
    if window.is_empty() {
        return 0.0;
    }
    window.iter().map(|s| s.mined() as f64).sum::<f64>() / window.len() as f64
}

/// Trains on `dataset` with `exp` and evaluates structure and tracking.
pub fn run_experiment(exp: &ExperimentConfig, dataset: &Dataset, label: &str) -> Result<RunArtifacts> {
    let train_frames = prepare_frames(&dataset.train_frames(), &exp.train)?;
    let holdout_frames = prepare_frames(&dataset.holdout(), &exp.train)?;
    let outcome = train_prepared(&exp.train, &train_frames)?;
    let params = exp.train.margin()?;
    let metric = exp.train.distance;
    let eps = exp.eval.epsilon;
    let structure = SplitStructure {
        train: structure_report(&outcome.model, &outcome.reference, &train_frames, &params, metric, eps)?,
        holdout: structure_report(&outcome.model, &outcome.model, &holdout_frames, &params, metric, eps)?,
    };
    let track = track_dataset(&outcome.model, dataset, &exp.eval, exp.train.seed)?;
    let summary = RunSummary {
        variant: label.to_string(),
        seed: Some(exp.train.seed),
        precision_rate: track.precision_rate,
        success_rate: track.success_rate,
        band_occupancy_pos: structure.train.band_occupancy_pos,
        band_occupancy_neg: structure.train.band_occupancy_neg,
        margin_satisfaction: structure.holdout.margin_satisfaction,
        cross_modal_satisfaction: structure.holdout.cross_modal_satisfaction,
        mined_early: mined_window(&outcome, false),
        mined_late: mined_window(&outcome, true),
    };
    Ok(RunArtifacts {
        outcome,
        structure,
        track,
        summary,
    })
}

pub fn dataset_for(exp: &ExperimentConfig) -> Result<Dataset> {
    Dataset::generate(&exp.data, exp.train.n_pos, exp.train.n_neg, exp.dataset_seed())
}

/// Applies a named variant to a config.
pub fn with_variant(exp: &ExperimentConfig, name: &str) -> Result<ExperimentConfig> {
    let v = variant(name)?;
    let mut c = exp.clone();
    c.train.objective = v.objective;
    c.train.model.fusion = v.fusion;
    Ok(c)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<RunSummary>,
}

impl ComparisonTable {
    /// Per-seed rows of every label followed by one mean row per label.
    pub fn from_runs(runs: Vec<RunSummary>) -> Self {
        let mut labels: Vec<String> = Vec::new();
        for r in &runs {
            if !labels.contains(&r.variant) {
                labels.push(r.variant.clone());
            }
        }
        let mut rows = runs.clone();
        for l in labels {
            let group: Vec<&RunSummary> = runs.iter().filter(|r| r.variant == l).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&RunSummary) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            rows.push(RunSummary {
                variant: l,
                seed: None,
                precision_rate: mean(|r| r.precision_rate),
                success_rate: mean(|r| r.success_rate),
                band_occupancy_pos: mean(|r| r.band_occupancy_pos),
                band_occupancy_neg: mean(|r| r.band_occupancy_neg),
                margin_satisfaction: mean(|r| r.margin_satisfaction),
                cross_modal_satisfaction: mean(|r| r.cross_modal_satisfaction),
                mined_early: mean(|r| r.mined_early),
                mined_late: mean(|r| r.mined_late),
            });
        }
        Self { rows }
    }

    pub fn mean(&self, variant: &str) -> Option<&RunSummary> {
        self.rows.iter().find(|r| r.variant == variant && r.seed.is_none())
    }

    pub fn runs(&self, variant: &str) -> Vec<&RunSummary> {
        self.rows.iter().filter(|r| r.variant == variant && r.seed.is_some()).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// Trains every variant for every seed; variants of one seed share a dataset.
pub fn run_ablation(base: &ExperimentConfig, variants: &[&str], seeds: &[u64]) -> Result<ComparisonTable> {
    if seeds.is_empty() {
        return Err(Error::contract("ablation needs at least one seed"));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let exp = base.with_seed(seed);
        let dataset = dataset_for(&exp)?;
        for name in variants {
            let cfg = with_variant(&exp, name)?;
            runs.push(run_experiment(&cfg, &dataset, name)?.summary);
        }
    }
    Ok(ComparisonTable::from_runs(runs))
}

/// A sweepable margin knob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    M,
    Beta,
    Delta,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(SweepParam::M),
            "beta" => Ok(SweepParam::Beta),
            "delta" => Ok(SweepParam::Delta),
            other => Err(Error::Unknown {
                kind: "sweep parameter",
                name: other.into(),
                known: "m, beta, delta".into(),
            }),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::M => "m",
            SweepParam::Beta => "beta",
            SweepParam::Delta => "delta",
        }
    }

    /// Grid reported by default.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::M => vec![0.0, 0.2, 0.4],
            SweepParam::Beta => vec![0.0, 0.1, 0.2, 0.3],
            SweepParam::Delta => vec![0.0, 0.1, 0.2, 0.4],
        }
    }

    pub fn apply(self, exp: &mut ExperimentConfig, value: f64) {
        match self {
            SweepParam::M => exp.train.m = value,
            SweepParam::Beta => exp.train.beta = value,
            SweepParam::Delta => exp.train.delta = value,
        }
    }
}

/// Rows are labeled `<param>=<value>`.
pub fn run_sweep(base: &ExperimentConfig, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<ComparisonTable> {
    if seeds.is_empty() || values.is_empty() {
        return Err(Error::contract("sweep needs at least one seed and one value"));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let exp = base.with_seed(seed);
        let dataset = dataset_for(&exp)?;
        for &v in values {
            let mut cfg = exp.clone();
            param.apply(&mut cfg, v);
            cfg.validate()?;
            runs.push(run_experiment(&cfg, &dataset, &format!("{}={}", param.name(), v))?.summary);
        }
    }
    Ok(ComparisonTable::from_runs(runs))
}
