//! Metric-learning and classification losses with analytic gradients.
//!
//! Distance-based losses consume whichever [`Metric`] the caller passes; the
//! structured losses work directly on anchor distances so the objectives can
//! chain their gradients through a single distance computation.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::metric::Metric;
use crate::mining::{Label, LabeledEmbedding, MarginParams, MinedIndices, MinedSets};

/// A loss value with its named parts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub terms: Vec<(String, f64)>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        Self { value, terms: Vec::new() }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Loss value and its gradient w.r.t. the rows of an input matrix.
#[derive(Clone, Debug)]
pub struct Graded {
    pub loss: LossValue,
    pub grad: Array2<f64>,
}

fn row(m: &ArrayView2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

/// Accumulates `scale * d metric(e_a, e_b) / d e` into `grad` rows `a` and `b`.
fn push_distance_grad(
    emb: &ArrayView2<f64>,
    grad: &mut Array2<f64>,
    metric: Metric,
    a: usize,
    b: usize,
    scale: f64,
    buf: &mut [f64],
) {
    let (u, v) = (row(emb, a), row(emb, b));
    metric.grad_into(&u, &v, buf);
    for (k, g) in buf.iter().enumerate() {
        grad[[a, k]] += scale * g;
        grad[[b, k]] -= scale * g;
    }
}

/// Mean hinge `max(d(a,p) + margin - d(a,n), 0)` over index triplets into
/// `emb`; only active triplets carry gradient.
pub fn triplet_loss(
    emb: ArrayView2<f64>,
    triplets: &[(usize, usize, usize)],
    margin: f64,
    metric: Metric,
) -> Result<Graded> {
    if triplets.is_empty() {
        return Err(Error::contract("triplet loss needs at least one triplet"));
    }
    let n = emb.nrows();
    if let Some(&(a, p, q)) = triplets.iter().find(|&&(a, p, q)| a.max(p).max(q) >= n) {
        return Err(Error::contract(format!("triplet ({a}, {p}, {q}) out of range for {n} rows")));
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut grad = Array2::zeros(emb.raw_dim());
    let mut buf = vec![0.0; emb.ncols()];
    let mut total = 0.0;
    for &(a, p, q) in triplets {
        let dp = metric.eval(&row(&emb, a), &row(&emb, p));
        let dn = metric.eval(&row(&emb, a), &row(&emb, q));
        let h = dp + margin - dn;
        if h > 0.0 {
            total += h;
            push_distance_grad(&emb, &mut grad, metric, a, p, scale, &mut buf);
            push_distance_grad(&emb, &mut grad, metric, a, q, -scale, &mut buf);
        }
    }
    Ok(Graded {
        loss: LossValue::scalar(total * scale),
        grad,
    })
}

/// Anchor-based triplet loss over every (positive, negative) pair:
/// mean of `max(d_p + margin - d_n, 0)`, with gradients w.r.t. the distances.
pub fn triplet_from_distances(pos: &[f64], neg: &[f64], margin: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let mut g_pos = vec![0.0; pos.len()];
    let mut g_neg = vec![0.0; neg.len()];
    if pos.is_empty() || neg.is_empty() {
        return (0.0, g_pos, g_neg);
    }
    let scale = 1.0 / (pos.len() * neg.len()) as f64;
    let mut total = 0.0;
    for (i, &dp) in pos.iter().enumerate() {
        for (j, &dn) in neg.iter().enumerate() {
            let h = dp + margin - dn;
            if h > 0.0 {
                total += h;
                g_pos[i] += scale;
                g_neg[j] -= scale;
            }
        }
    }
    (total * scale, g_pos, g_neg)
}

/// Multi-class N-pair loss over `N` (anchor, positive) rows:
/// `(1/N) sum_i log(1 + sum_{j != i} exp(a_i . p_j - a_i . p_i))`.
///
/// Returns the loss and gradients w.r.t. the anchors and positives.
pub fn npair_loss(anchors: ArrayView2<f64>, positives: ArrayView2<f64>) -> Result<(LossValue, Array2<f64>, Array2<f64>)> {
    let n = anchors.nrows();
    if n < 2 {
        return Err(Error::contract(format!("n-pair loss needs at least 2 classes, got {n}")));
    }
    check_dim(n, positives.nrows())?;
    check_dim(anchors.ncols(), positives.ncols())?;
    let logits = anchors.dot(&positives.t());
    let mut d_logits = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        // log(1 + sum_j exp(z_j)) with z_j = l_ij - l_ii, j != i; as a
        // log-sum-exp over {0} U {z_j}
        let zs: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| logits[[i, j]] - logits[[i, i]]).collect();
        let top = zs.iter().copied().fold(0.0_f64, f64::max);
        let denom = (-top).exp() + zs.iter().map(|z| (z - top).exp()).sum::<f64>();
        total += top + denom.ln();
        let mut k = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = (zs[k] - top).exp() / denom;
            d_logits[[i, j]] += w / n as f64;
            d_logits[[i, i]] -= w / n as f64;
            k += 1;
        }
    }
    let d_anchor = d_logits.dot(&positives);
    let d_pos = d_logits.t().dot(&anchors);
    Ok((LossValue::scalar(total / n as f64), d_anchor, d_pos))
}

/// Lifted structured loss over all same-label pairs:
/// `1/(2|P|) sum_{(i,j) in P} [d_ij + log(sum_{(i,k) in N} e^{beta - d_ik} + sum_{(j,l) in N} e^{beta - d_jl})]_+`
/// with an unsquared hinge.
pub fn lifted_struct_loss(emb: ArrayView2<f64>, labels: &[usize], beta: f64, metric: Metric) -> Result<Graded> {
    let n = emb.nrows();
    check_dim(n, labels.len())?;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(&emb, i)).collect();
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = metric.eval(&rows[i], &rows[j]);
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .filter(|&(i, j)| labels[i] == labels[j])
        .collect();
    if pairs.is_empty() {
        return Err(Error::contract("lifted structured loss needs at least one positive pair"));
    }
    let scale = 1.0 / (2.0 * pairs.len() as f64);
    // d loss / d dist[i][j], symmetric accumulation
    let mut d_dist = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for &(i, j) in &pairs {
        let links: Vec<(usize, usize)> = (0..n)
            .filter(|&k| labels[k] != labels[i])
            .map(|k| (i, k))
            .chain((0..n).filter(|&l| labels[l] != labels[j]).map(|l| (j, l)))
            .collect();
        if links.is_empty() {
            return Err(Error::contract("lifted structured loss needs at least one negative link"));
        }
        let top = links.iter().map(|&(a, b)| beta - dist[[a, b]]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = links.iter().map(|&(a, b)| (beta - dist[[a, b]] - top).exp()).sum();
        let j_ij = dist[[i, j]] + top + sum.ln();
        if j_ij > 0.0 {
            total += j_ij;
            d_dist[[i, j]] += scale;
            for &(a, b) in &links {
                let w = (beta - dist[[a, b]] - top).exp() / sum;
                d_dist[[a, b]] -= scale * w;
            }
        }
    }
    let mut grad = Array2::zeros(emb.raw_dim());
    let mut buf = vec![0.0; emb.ncols()];
    for a in 0..n {
        for b in 0..n {
            let s = d_dist[[a, b]];
            if s != 0.0 {
                push_distance_grad(&emb, &mut grad, metric, a, b, s, &mut buf);
            }
        }
    }
    Ok(Graded {
        loss: LossValue::scalar(total * scale),
        grad,
    })
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-sample interval term.
///
/// Positives: `|d - (alpha - beta)| + |d - alpha|`; negatives:
/// `|alpha + m - d| + |alpha + m + beta - d|`. The minimum, `beta`, is reached
/// exactly on the target band.
pub fn mmsl_pair_loss(d: f64, label: Label, params: &MarginParams) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::contract(format!("distance must be non-negative, got {d}")));
    }
    // written as beta plus twice the distance to the band so that the floor
    // is beta itself, not hi - lo rounded
    let (lo, hi) = band(label, params);
    Ok(if d < lo {
        params.beta + 2.0 * (lo - d)
    } else if d > hi {
        params.beta + 2.0 * (d - hi)
    } else {
        params.beta
    })
}

/// Subgradient of [`mmsl_pair_loss`] in `d`, zero at the kinks.
pub fn mmsl_pair_grad(d: f64, label: Label, params: &MarginParams) -> f64 {
    let (lo, hi) = band(label, params);
    sign0(d - lo) + sign0(d - hi)
}

fn band(label: Label, params: &MarginParams) -> (f64, f64) {
    match label {
        Label::Positive => params.positive_band(),
        Label::Negative => params.negative_band(),
    }
}

/// Mean interval losses over the confusing positives and negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SetLosses {
    pub positive: f64,
    pub negative: f64,
}

impl SetLosses {
    pub fn sum(&self) -> f64 {
        self.positive + self.negative
    }
}

/// Set losses from anchor distances; empty sets contribute 0. Also returns
/// the gradient w.r.t. every distance.
pub fn set_losses_from_distances(
    distances: &[f64],
    labels: &[Label],
    mined: &MinedIndices,
    params: &MarginParams,
) -> (SetLosses, Vec<f64>) {
    let mut grad = vec![0.0; distances.len()];
    let mut mean_over = |idx: &[usize], label: Label| -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let w = 1.0 / idx.len() as f64;
        let mut s = 0.0;
        for &i in idx {
            debug_assert_eq!(labels[i], label);
            let (lo, hi) = band(label, params);
            let d = distances[i];
            s += (d - lo).abs() + (d - hi).abs();
            grad[i] += w * mmsl_pair_grad(d, label, params);
        }
        s * w
    };
    let positive = mean_over(&mined.positives, Label::Positive);
    let negative = mean_over(&mined.negatives, Label::Negative);
    (SetLosses { positive, negative }, grad)
}

/// Set losses for one modality given samples mined against `anchor`.
pub fn mmsl_set_losses(
    anchor: &[f64],
    samples: &[LabeledEmbedding],
    mined: &MinedSets,
    params: &MarginParams,
    metric: Metric,
) -> Result<SetLosses> {
    let mean_for = |ids: &[u64], label: Label| -> Result<f64> {
        if ids.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for id in ids {
            let s = samples
                .iter()
                .find(|s| s.sample_id == *id)
                .ok_or_else(|| Error::contract(format!("mined id {id} not among the samples")))?;
            if s.label != label {
                return Err(Error::contract(format!("mined id {id} has the wrong label")));
            }
            check_dim(anchor.len(), s.embedding.dim())?;
            total += mmsl_pair_loss(metric.eval(anchor, s.embedding.as_slice()), label, params)?;
        }
        Ok(total / ids.len() as f64)
    };
    Ok(SetLosses {
        positive: mean_for(&mined.confusing_positives, Label::Positive)?,
        negative: mean_for(&mined.confusing_negatives, Label::Negative)?,
    })
}

/// How the positive side of the cross-modality hinge aggregates distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossReading {
    /// Largest positive distance (hardest pair).
    #[default]
    Worst,
    /// Mean positive distance.
    Mean,
}

/// Gradients of the cross-modality loss w.r.t. each input list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CrossGrad {
    pub pos_r: Vec<f64>,
    pub neg_r: Vec<f64>,
    pub pos_t: Vec<f64>,
    pub neg_t: Vec<f64>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// One direction of the hinge: positives from one modality against the
/// nearest negative of the other. Returns the value and fills gradients.
fn cross_direction(pos: &[f64], neg: &[f64], delta: f64, reading: CrossReading, g_pos: &mut [f64], g_neg: &mut [f64]) -> f64 {
    let j = argmin(neg);
    let pos_term = match reading {
        CrossReading::Worst => pos[argmax(pos)],
        CrossReading::Mean => pos.iter().sum::<f64>() / pos.len() as f64,
    };
    let h = pos_term - neg[j] + delta;
    if h > 0.0 {
        match reading {
            CrossReading::Worst => g_pos[argmax(pos)] += 1.0,
            CrossReading::Mean => g_pos.iter_mut().for_each(|g| *g += 1.0 / pos.len() as f64),
        }
        g_neg[j] -= 1.0;
        h
    } else {
        0.0
    }
}

/// `max{P_r - min N_t + delta, 0} + max{P_t - min N_r + delta, 0}` where `P`
/// aggregates the positive distances per `reading`.
pub fn cross_modality_loss_with_grad(
    pos_r: &[f64],
    neg_r: &[f64],
    pos_t: &[f64],
    neg_t: &[f64],
    delta: f64,
    reading: CrossReading,
) -> Result<(f64, CrossGrad)> {
    if pos_r.is_empty() || neg_r.is_empty() || pos_t.is_empty() || neg_t.is_empty() {
        return Err(Error::contract("cross-modality loss needs non-empty distance lists"));
    }
    let mut g = CrossGrad {
        pos_r: vec![0.0; pos_r.len()],
        neg_r: vec![0.0; neg_r.len()],
        pos_t: vec![0.0; pos_t.len()],
        neg_t: vec![0.0; neg_t.len()],
    };
    let a = cross_direction(pos_r, neg_t, delta, reading, &mut g.pos_r, &mut g.neg_t);
    let b = cross_direction(pos_t, neg_r, delta, reading, &mut g.pos_t, &mut g.neg_r);
    Ok((a + b, g))
}

/// Cross-modality loss under the hardest-pair reading.
pub fn cross_modality_loss(pos_r: &[f64], neg_r: &[f64], pos_t: &[f64], neg_t: &[f64], delta: f64) -> Result<f64> {
    cross_modality_loss_with_grad(pos_r, neg_r, pos_t, neg_t, delta, CrossReading::Worst).map(|(v, _)| v)
}

/// `L_rgb + L_t + L_cross`, unweighted, with the breakdown.
pub fn mmsl_total(rgb: SetLosses, thermal: SetLosses, cross: f64) -> LossValue {
    let l_rgb = rgb.sum();
    let l_t = thermal.sum();
    LossValue {
        value: l_rgb + l_t + cross,
        terms: vec![
            ("l_rgb".into(), l_rgb),
            ("l_t".into(), l_t),
            ("l_cross".into(), cross),
        ],
    }
}

/// Mean two-way softmax cross-entropy; logits rows are `(positive, negative)`.
pub fn classification_loss(logits: ArrayView2<f64>, labels: &[Label]) -> Result<Graded> {
    if logits.nrows() == 0 {
        return Err(Error::contract("classification loss needs a non-empty batch"));
    }
    check_dim(2, logits.ncols())?;
    check_dim(logits.nrows(), labels.len())?;
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let (lp, ln) = (logits[[i, 0]], logits[[i, 1]]);
        if !lp.is_finite() || !ln.is_finite() {
            return Err(Error::NonFinite {
                context: format!("logit row {i}"),
                value: if lp.is_finite() { ln } else { lp },
            });
        }
        let top = lp.max(ln);
        let lse = top + ((lp - top).exp() + (ln - top).exp()).ln();
        let target = if label.is_positive() { 0 } else { 1 };
        total += lse - logits[[i, target]];
        let p_pos = (lp - lse).exp();
        let p_neg = (ln - lse).exp();
        grad[[i, 0]] = (p_pos - if target == 0 { 1.0 } else { 0.0 }) / n;
        grad[[i, 1]] = (p_neg - if target == 1 { 1.0 } else { 0.0 }) / n;
    }
    Ok(Graded {
        loss: LossValue::scalar(total / n),
        grad,
    })
}

/// Positive-class probability for each logits row.
pub fn positive_scores(logits: ArrayView2<f64>) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|r| crate::nn::sigmoid(r[0] - r[1]))
        .collect()
}
