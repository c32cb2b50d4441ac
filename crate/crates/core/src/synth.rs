//! Synthetic two-modality tracking data.
//!
//! Sequences move a ground-truth box with a constant-velocity model and
//! surround it with confuser regions. A deterministic feature oracle maps
//! `(box, frame, modality)` to a feature vector: the target's appearance
//! weighted by overlap, confuser appearances weighted by their overlap, the
//! background for the rest, a modality offset and box-seeded noise.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::Modality;
use crate::error::{Error, Result};
use crate::metric::Vector;
use crate::mining::Label;

/// Axis-aligned box by center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::contract(format!("invalid box ({cx}, {cy}, {w}, {h})")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }
}

fn overlap_1d(c1: f64, l1: f64, c2: f64, l2: f64) -> f64 {
    ((l1 + l2) / 2.0 - (c1 - c2).abs()).clamp(0.0, l1.min(l2))
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = overlap_1d(a.cx, a.w, b.cx, b.w) * overlap_1d(a.cy, a.h, b.cy, b.h);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Gaussian jitter used for proposals and tracking candidates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_log_scale: f64,
}

impl Spread {
    /// Position sigma `0.3 * min(w, h)`, log-scale sigma `0.15`.
    pub fn default_for(b: &BBox) -> Self {
        Self::relative(b, 0.3, 0.15)
    }

    pub fn relative(b: &BBox, position: f64, log_scale: f64) -> Self {
        let s = position * b.w.min(b.h);
        Self {
            sigma_x: s,
            sigma_y: s,
            sigma_log_scale: log_scale,
        }
    }

    /// Draws a box around `center`; one shared scale factor keeps the aspect ratio.
    pub fn sample<R: Rng>(&self, center: &BBox, rng: &mut R) -> BBox {
        let z: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let scale = (self.sigma_log_scale * z[2]).exp();
        BBox {
            cx: center.cx + self.sigma_x * z[0],
            cy: center.cy + self.sigma_y * z[1],
            w: center.w * scale,
            h: center.h * scale,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalLabel {
    Positive,
    Negative,
    Discarded,
}

pub const POSITIVE_IOU: f64 = 0.7;
pub const NEGATIVE_IOU: f64 = 0.5;

/// `> 0.7` positive, `< 0.5` negative, otherwise discarded.
pub fn label_for_iou(v: f64) -> ProposalLabel {
    if v > POSITIVE_IOU {
        ProposalLabel::Positive
    } else if v < NEGATIVE_IOU {
        ProposalLabel::Negative
    } else {
        ProposalLabel::Discarded
    }
}

impl ProposalLabel {
    pub fn as_label(self) -> Option<Label> {
        match self {
            ProposalLabel::Positive => Some(Label::Positive),
            ProposalLabel::Negative => Some(Label::Negative),
            ProposalLabel::Discarded => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub iou: f64,
    pub label: ProposalLabel,
}

/// Per-class cap on draws made while that class is still short.
pub const MAX_ATTEMPTS_PER_CLASS: usize = 10_000;

/// Rejection-samples exactly `n_pos` positives and `n_neg` negatives from a
/// Gaussian around `gt`, in draw order.
pub fn sample_proposals(gt: &BBox, n_pos: usize, n_neg: usize, spread: &Spread, seed: u64) -> Result<Vec<Proposal>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_pos + n_neg);
    let (mut pos, mut neg) = (0, 0);
    let (mut pos_attempts, mut neg_attempts) = (0, 0);
    while pos < n_pos || neg < n_neg {
        if pos < n_pos {
            pos_attempts += 1;
            if pos_attempts > MAX_ATTEMPTS_PER_CLASS {
                return Err(Error::Starved {
                    class: "positive",
                    attempts: MAX_ATTEMPTS_PER_CLASS,
                });
            }
        }
        if neg < n_neg {
            neg_attempts += 1;
            if neg_attempts > MAX_ATTEMPTS_PER_CLASS {
                return Err(Error::Starved {
                    class: "negative",
                    attempts: MAX_ATTEMPTS_PER_CLASS,
                });
            }
        }
        let bbox = spread.sample(gt, &mut rng);
        let v = iou(gt, &bbox);
        let label = label_for_iou(v);
        let keep = match label {
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
            out.push(Proposal { bbox, iou: v, label });
        }
    }
    Ok(out)
}

/// Appearance vectors of one modality in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityScene {
    pub target: Vec<f64>,
    pub background: Vec<f64>,
    pub confusers: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub noise: f64,
}

/// Oracle knobs carried with each frame so stored datasets replay exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    /// How strongly overlap with a confuser region replaces background by the
    /// confuser's target-like appearance.
    pub confuser_pull: f64,
    /// Correlation between the two modalities' noise draws.
    pub noise_correlation: f64,
    /// Probability that a box sees the target partly occluded.
    pub occlusion_prob: f64,
    /// Fraction of the target weight lost to background under occlusion.
    pub occlusion_strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub sequence: usize,
    pub index: usize,
    pub ground_truth: BBox,
    pub confusers: Vec<BBox>,
    pub rgb: ModalityScene,
    pub thermal: ModalityScene,
    pub oracle: OracleParams,
    pub noise_seed: u64,
}

impl Frame {
    pub fn scene(&self, modality: Modality) -> &ModalityScene {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Thermal => &self.thermal,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.rgb.target.len()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn box_seed(frame_seed: u64, b: &BBox) -> u64 {
    [b.cx, b.cy, b.w, b.h]
        .iter()
        .fold(splitmix(frame_seed), |acc, v| splitmix(acc ^ v.to_bits()))
}

/// Feature vector of `bbox` as seen in `modality` at `frame`.
///
/// With zero noise, `bbox == ground_truth` yields exactly
/// `target + offset`, and a box overlapping neither target nor confusers
/// yields `background + offset`.
pub fn feature_oracle(bbox: &BBox, frame: &Frame, modality: Modality) -> Vector {
    let scene = frame.scene(modality);
    let params = &frame.oracle;
    let dim = scene.target.len();
    let mut rng = ChaCha8Rng::seed_from_u64(box_seed(frame.noise_seed, bbox));
    let occluded = rng.random::<f64>() < params.occlusion_prob;

    let mut w_target = iou(&frame.ground_truth, bbox);
    if occluded {
        w_target *= 1.0 - params.occlusion_strength;
    }
    let rest = 1.0 - w_target;
    let overlaps: Vec<f64> = frame.confusers.iter().map(|c| iou(c, bbox)).collect();
    let total_overlap: f64 = overlaps.iter().sum();
    let confuser_share = (params.confuser_pull * total_overlap).min(1.0);

    let mut f = vec![0.0; dim];
    for k in 0..dim {
        let mut v = w_target * scene.target[k] + scene.offset[k];
        v += rest * (1.0 - confuser_share) * scene.background[k];
        if total_overlap > 0.0 {
            for (c, &o) in scene.confusers.iter().zip(&overlaps) {
                v += rest * confuser_share * (o / total_overlap) * c[k];
            }
        }
        f[k] = v;
    }

    if scene.noise > 0.0 {
        let rho = params.noise_correlation.clamp(-1.0, 1.0);
        let shared: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let own: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for k in 0..dim {
            let z = match modality {
                Modality::Rgb => shared[k],
                Modality::Thermal => rho * shared[k] + (1.0 - rho * rho).sqrt() * own[k],
            };
            f[k] += scene.noise * z;
        }
    }
    Vector::new(f).expect("oracle features are finite")
}

/// Generation knobs for synthetic sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sequences: usize,
    pub frames: usize,
    /// Trailing frames of each sequence kept out of training.
    pub holdout_frames: usize,
    pub feature_dim: usize,
    pub confusers: usize,
    pub box_width: f64,
    pub box_height: f64,
    /// Speed per frame, in box widths.
    pub speed: f64,
    /// Per-frame center perturbation, in box widths.
    pub motion_noise: f64,
    pub scale_noise: f64,
    /// Confuser distance from the target center, in box widths.
    pub confuser_radius: f64,
    /// Angular speed of confusers around the target, radians per frame.
    pub confuser_orbit: f64,
    pub confuser_pull: f64,
    /// Std of the confuser signature shared by every confuser.
    pub confuser_offset: f64,
    /// Std of the per-confuser appearance part.
    pub confuser_specific: f64,
    /// Std of the per-sequence target appearance part.
    pub target_specific: f64,
    /// Std of the per-sequence background part around the shared background.
    pub background_specific: f64,
    /// Per-frame random-walk step of the target appearance.
    pub appearance_drift: f64,
    pub noise_rgb: f64,
    pub noise_thermal: f64,
    pub noise_correlation: f64,
    /// Probability that a modality is degraded in a frame.
    pub degraded_prob: f64,
    pub degraded_factor: f64,
    pub occlusion_prob: f64,
    pub occlusion_strength: f64,
    /// Proposal position spread relative to `min(w, h)`.
    pub spread_position: f64,
    pub spread_log_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sequences: 20,
            frames: 50,
            holdout_frames: 10,
            feature_dim: 16,
            confusers: 4,
            box_width: 40.0,
            box_height: 32.0,
            speed: 0.08,
            motion_noise: 0.04,
            scale_noise: 0.01,
            confuser_radius: 0.9,
            confuser_orbit: 0.05,
            confuser_pull: 1.0,
            confuser_offset: 0.6,
            confuser_specific: 0.3,
            target_specific: 0.5,
            background_specific: 0.3,
            appearance_drift: 0.02,
            noise_rgb: 0.08,
            noise_thermal: 0.08,
            noise_correlation: 0.3,
            degraded_prob: 0.05,
            degraded_factor: 3.0,
            occlusion_prob: 0.0,
            occlusion_strength: 0.3,
            spread_position: 0.3,
            spread_log_scale: 0.15,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames == 0 {
            return Err(Error::Config("need at least one sequence and one frame".into()));
        }
        if self.holdout_frames >= self.frames {
            return Err(Error::Config("holdout_frames must leave at least one training frame".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.box_width > 0.0 && self.box_height > 0.0) {
            return Err(Error::Config("box size must be positive".into()));
        }
        Ok(())
    }
}

/// Dataset-wide appearance signatures, shared by all sequences.
#[derive(Clone, Debug)]
struct Signatures {
    target: [Vec<f64>; 2],
    background: [Vec<f64>; 2],
    confuser: [Vec<f64>; 2],
    offset: [Vec<f64>; 2],
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, std: f64) -> Vec<f64> {
    let n = Normal::new(0.0, std.max(0.0)).expect("non-negative std");
    (0..dim).map(|_| n.sample(rng)).collect()
}

fn signatures(cfg: &DataConfig, seed: u64) -> Signatures {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5167_4E41_5455_5245));
    let d = cfg.feature_dim;
    let mut two = |std: f64| [gaussian_vec(&mut rng, d, std), gaussian_vec(&mut rng, d, std)];
    let target = two(1.0);
    let background = two(1.0);
    let confuser = two(cfg.confuser_offset);
    let offset = two(1.0);
    Signatures {
        target,
        background,
        confuser,
        offset,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSequence {
    pub id: usize,
    pub seed: u64,
    pub frames: Vec<Frame>,
}

/// Generates sequence `id` of a dataset seeded by `seed`.
pub fn gen_sequence(cfg: &DataConfig, id: usize, seed: u64) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let sig = signatures(cfg, seed);
    let seq_seed = splitmix(seed.wrapping_add(id as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let mut rng = ChaCha8Rng::seed_from_u64(seq_seed);
    let d = cfg.feature_dim;

    let size_jitter = (0.2 * rng.random::<f64>() - 0.1).exp();
    let mut gt = BBox::new(
        rng.random_range(100.0..300.0),
        rng.random_range(100.0..300.0),
        cfg.box_width * size_jitter,
        cfg.box_height * size_jitter,
    )?;
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let velocity = (cfg.speed * gt.w * heading.cos(), cfg.speed * gt.w * heading.sin());

    let confuser_geometry: Vec<(f64, f64)> = (0..cfg.confusers)
        .map(|k| {
            let base = std::f64::consts::TAU * k as f64 / cfg.confusers as f64;
            let angle = base + rng.random_range(-0.4..0.4);
            let radius = cfg.confuser_radius * (1.0 + rng.random_range(-0.15..0.15));
            (angle, radius)
        })
        .collect();

    let mut looks: Vec<[Vec<f64>; 4]> = Vec::with_capacity(2);
    let mut confuser_looks: Vec<Vec<Vec<f64>>> = Vec::with_capacity(2);
    for m in 0..2 {
        let specific = gaussian_vec(&mut rng, d, cfg.target_specific);
        let target: Vec<f64> = sig.target[m].iter().zip(&specific).map(|(a, b)| a + b).collect();
        let own_bg = gaussian_vec(&mut rng, d, cfg.background_specific);
        let background: Vec<f64> = sig.background[m].iter().zip(&own_bg).map(|(a, b)| a + b).collect();
        let confusers = (0..cfg.confusers)
            .map(|_| {
                let own = gaussian_vec(&mut rng, d, cfg.confuser_specific);
                (0..d).map(|k| sig.target[m][k] + sig.confuser[m][k] + own[k]).collect()
            })
            .collect();
        looks.push([target, background, sig.offset[m].clone(), specific]);
        confuser_looks.push(confusers);
    }

    let mut drift = [vec![0.0; d], vec![0.0; d]];
    let mut frames = Vec::with_capacity(cfg.frames);
    for index in 0..cfg.frames {
        if index > 0 {
            let jitter = (
                cfg.motion_noise * gt.w * std_normal(&mut rng),
                cfg.motion_noise * gt.w * std_normal(&mut rng),
            );
            let scale = (cfg.scale_noise * std_normal(&mut rng)).exp();
            gt = BBox::new(gt.cx + velocity.0 + jitter.0, gt.cy + velocity.1 + jitter.1, gt.w * scale, gt.h * scale)?;
            for dm in drift.iter_mut() {
                for v in dm.iter_mut() {
                    *v += cfg.appearance_drift * std_normal(&mut rng);
                }
            }
        }
        let confusers = confuser_geometry
            .iter()
            .map(|&(angle, radius)| {
                let a = angle + cfg.confuser_orbit * index as f64;
                BBox::new(gt.cx + radius * gt.w * a.cos(), gt.cy + radius * gt.w * a.sin(), gt.w, gt.h)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut scenes = Vec::with_capacity(2);
        for m in 0..2 {
            let [target, background, offset, _] = &looks[m];
            let base_noise = if m == 0 { cfg.noise_rgb } else { cfg.noise_thermal };
            let degraded = rng.random::<f64>() < cfg.degraded_prob;
            scenes.push(ModalityScene {
                target: target.iter().zip(&drift[m]).map(|(a, b)| a + b).collect(),
                background: background.clone(),
                confusers: confuser_looks[m].clone(),
                offset: offset.clone(),
                noise: if degraded { base_noise * cfg.degraded_factor } else { base_noise },
            });
        }
        let thermal = scenes.pop().expect("two scenes");
        let rgb = scenes.pop().expect("two scenes");
        frames.push(Frame {
            sequence: id,
            index,
            ground_truth: gt,
            confusers,
            rgb,
            thermal,
            oracle: OracleParams {
                confuser_pull: cfg.confuser_pull,
                noise_correlation: cfg.noise_correlation,
                occlusion_prob: cfg.occlusion_prob,
                occlusion_strength: cfg.occlusion_strength,
            },
            noise_seed: rng.random(),
        });
    }
    Ok(SyntheticSequence {
        id,
        seed: seq_seed,
        frames,
    })
}

/// A proposal with its features in both modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedProposal {
    #[serde(flatten)]
    pub proposal: Proposal,
    pub features_r: Vector,
    pub features_t: Vector,
}

/// One JSON-lines record: a frame, its scene and its labeled proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFrame {
    #[serde(flatten)]
    pub frame: Frame,
    pub proposals: Vec<ObservedProposal>,
}

impl DatasetFrame {
    pub fn observe(frame: Frame, n_pos: usize, n_neg: usize, spread: &Spread, seed: u64) -> Result<Self> {
        let proposals = sample_proposals(&frame.ground_truth, n_pos, n_neg, spread, seed)?
            .into_iter()
            .map(|p| ObservedProposal {
                features_r: feature_oracle(&p.bbox, &frame, Modality::Rgb),
                features_t: feature_oracle(&p.bbox, &frame, Modality::Thermal),
                proposal: p,
            })
            .collect();
        Ok(Self { frame, proposals })
    }

    pub fn anchor_features(&self, modality: Modality) -> Vector {
        feature_oracle(&self.frame.ground_truth, &self.frame, modality)
    }
}

/// Frames grouped by sequence, in sequence then frame order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub frames: Vec<DatasetFrame>,
    pub holdout_frames: usize,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig, n_pos: usize, n_neg: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut frames = Vec::with_capacity(cfg.sequences * cfg.frames);
        for id in 0..cfg.sequences {
            let seq = gen_sequence(cfg, id, seed)?;
            for frame in seq.frames {
                let spread = Spread::relative(&frame.ground_truth, cfg.spread_position, cfg.spread_log_scale);
                let proposal_seed = splitmix(seq.seed ^ (frame.index as u64).wrapping_mul(0x9E37));
                frames.push(DatasetFrame::observe(frame, n_pos, n_neg, &spread, proposal_seed)?);
            }
        }
        Ok(Self {
            frames,
            holdout_frames: cfg.holdout_frames,
        })
    }

    fn frames_per_sequence(&self, seq: usize) -> usize {
        self.frames.iter().filter(|f| f.frame.sequence == seq).count()
    }

    pub fn is_holdout(&self, f: &DatasetFrame) -> bool {
        f.frame.index + self.holdout_frames >= self.frames_per_sequence(f.frame.sequence)
    }

    pub fn train_frames(&self) -> Vec<&DatasetFrame> {
        self.split(false)
    }

    pub fn holdout(&self) -> Vec<&DatasetFrame> {
        self.split(true)
    }

    fn split(&self, holdout: bool) -> Vec<&DatasetFrame> {
        let mut counts = std::collections::BTreeMap::new();
        for f in &self.frames {
            *counts.entry(f.frame.sequence).or_insert(0usize) += 1;
        }
        self.frames
            .iter()
            .filter(|f| (f.frame.index + self.holdout_frames >= counts[&f.frame.sequence]) == holdout)
            .collect()
    }

    /// Held-out frames of each sequence, in order.
    pub fn holdout_sequences(&self) -> Vec<Vec<&DatasetFrame>> {
        let mut by_seq: std::collections::BTreeMap<usize, Vec<&DatasetFrame>> = Default::default();
        for f in self.holdout() {
            by_seq.entry(f.frame.sequence).or_default().push(f);
        }
        by_seq.into_values().collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for f in &self.frames {
            serde_json::to_writer(&mut w, f)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, holdout_frames: usize) -> Result<Self> {
        let mut frames = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            frames.push(serde_json::from_str(&line)?);
        }
        Ok(Self { frames, holdout_frames })
    }
}
