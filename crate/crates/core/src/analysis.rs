//! Ground truth and diagnostics around the routing proxy.
//!
//! Oracle sink labels from full-attention weights, precision/recall of the
//! proxy against them, first-token concentration statistics, value/key norm
//! and key geometry statistics, per-head residual-stream metrics, and a
//! checker for the update-norm bound `|u| <= eps_v + delta * V_max`.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::scalar::{dot_f64, l2_norm_f64, Scalar};

/// Row sums further than this from one are rejected by [`oracle_labels`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
/// Slack used by [`BoundReport::holds`].
pub const BOUND_SLACK: f64 = 1e-6;
pub const DEFAULT_RESIDUAL_EPS: f64 = 1e-8;
const MIN_DIRECTION_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} sums to {sum}, not 1")]
    Unnormalized { row: usize, sum: f64 },
    #[error("no positive labels; recall is undefined")]
    NoPositives,
    #[error("need at least {need} {what}, got {got}")]
    TooFew { what: &'static str, need: usize, got: usize },
}

fn shape<T>(m: impl Into<String>) -> Result<T, AnalysisError> {
    Err(AnalysisError::Shape(m.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LabelMode {
    /// One label per weight row.
    Head,
    /// One label per group from the mean first-token mass of its rows.
    GroupMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleLabel {
    pub alpha0: f64,
    pub is_sink: bool,
}

/// Labels `[rows x len]` attention weights by first-token mass `alpha0 > gamma`.
pub fn oracle_labels<T: Scalar>(
    weights: &[T],
    rows: usize,
    gamma: f64,
    mode: LabelMode,
) -> Result<Vec<OracleLabel>, AnalysisError> {
    if rows == 0 || weights.is_empty() || !weights.len().is_multiple_of(rows) {
        return shape(format!("{} weights do not split into {rows} rows", weights.len()));
    }
    let len = weights.len() / rows;
    let mut alphas = Vec::with_capacity(rows);
    for (row, w) in weights.chunks_exact(len).enumerate() {
        let sum: f64 = w.iter().map(|x| x.as_f64()).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(AnalysisError::Unnormalized { row, sum });
        }
        alphas.push(w[0].as_f64());
    }
    let label = |alpha0: f64| OracleLabel { alpha0, is_sink: alpha0 > gamma };
    Ok(match mode {
        LabelMode::Head => alphas.into_iter().map(label).collect(),
        LabelMode::GroupMean => vec![label(alphas.iter().sum::<f64>() / rows as f64)],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    /// Items with `score >= threshold` are predicted positive.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// One point per distinct score, ascending threshold.
    pub points: Vec<OperatingPoint>,
    /// Average precision: `sum (R_i - R_{i-1}) P_i` over descending thresholds.
    pub auprc: f64,
    pub positives: usize,
    pub total: usize,
}

impl PrCurve {
    pub fn prevalence(&self) -> f64 {
        self.positives as f64 / self.total as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve, AnalysisError> {
    if scores.len() != labels.len() {
        return shape(format!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(AnalysisError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    let mut auprc = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        auprc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(OperatingPoint {
            threshold: s,
            precision,
            recall,
            f1: f1(precision, recall),
            true_pos: tp,
            false_pos: fp,
            false_neg: positives - tp,
        });
    }
    points.reverse();
    Ok(PrCurve {
        points,
        auprc,
        positives,
        total: scores.len(),
    })
}

/// Quadratic re-derivation of [`pr_curve`]: every distinct score is tried as
/// a threshold and all items are recounted.
pub fn pr_curve_brute_force(scores: &[f64], labels: &[bool]) -> Result<PrCurve, AnalysisError> {
    if scores.len() != labels.len() {
        return shape(format!("{} scores vs {} labels", scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(AnalysisError::NoPositives);
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let points: Vec<OperatingPoint> = thresholds
        .iter()
        .map(|&t| {
            let tp = scores.iter().zip(labels).filter(|&(&s, &l)| s >= t && l).count();
            let fp = scores.iter().zip(labels).filter(|&(&s, &l)| s >= t && !l).count();
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / positives as f64;
            OperatingPoint {
                threshold: t,
                precision,
                recall,
                f1: f1(precision, recall),
                true_pos: tp,
                false_pos: fp,
                false_neg: positives - tp,
            }
        })
        .collect();
    let mut auprc = 0.0;
    let mut prev = 0.0;
    for p in points.iter().rev() {
        auprc += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    Ok(PrCurve {
        points,
        auprc,
        positives,
        total: scores.len(),
    })
}

/// Confusion counts for the router's rule `score > tau`.
pub fn operating_point_strict(scores: &[f64], labels: &[bool], tau: f64) -> OperatingPoint {
    let positives = labels.iter().filter(|&&l| l).count();
    let (mut tp, mut fp) = (0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        if s > tau {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    // No predicted positives: precision is reported as 1 by convention.
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 1.0 };
    let recall = if positives > 0 { tp as f64 / positives as f64 } else { 0.0 };
    OperatingPoint {
        threshold: tau,
        precision,
        recall,
        f1: f1(precision, recall),
        true_pos: tp,
        false_pos: fp,
        false_neg: positives - tp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConcentrationStats {
    pub bos_score: f64,
    pub max_nonbos: f64,
    pub mean_nonbos: f64,
    /// `bos_score / max_nonbos`; infinite when every other weight is zero.
    pub ratio: f64,
}

pub fn concentration_stats<T: Scalar>(row: &[T], bos_index: usize) -> Result<ConcentrationStats, AnalysisError> {
    if row.len() < 2 {
        return Err(AnalysisError::TooFew { what: "tokens", need: 2, got: row.len() });
    }
    if bos_index >= row.len() {
        return shape(format!("bos index {bos_index} outside row of {}", row.len()));
    }
    let bos = row[bos_index].as_f64();
    let rest = row.iter().enumerate().filter(|&(i, _)| i != bos_index).map(|(_, x)| x.as_f64());
    let (max, sum) = rest.fold((f64::NEG_INFINITY, 0.0), |(m, s), x| (m.max(x), s + x));
    Ok(ConcentrationStats {
        bos_score: bos,
        max_nonbos: max,
        mean_nonbos: sum / (row.len() - 1) as f64,
        ratio: bos / max,
    })
}

/// Aggregate over many rows. `mean` averages each field independently (so
/// `mean.ratio` is a mean of per-row ratios); `pooled_ratio` is the ratio of
/// the mean BOS score to the mean max non-BOS score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConcentrationSummary {
    pub rows: usize,
    pub mean: ConcentrationStats,
    pub pooled_ratio: f64,
}

pub fn summarize_concentration(stats: &[ConcentrationStats]) -> Option<ConcentrationSummary> {
    if stats.is_empty() {
        return None;
    }
    let n = stats.len() as f64;
    let avg = |f: fn(&ConcentrationStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    let mean = ConcentrationStats {
        bos_score: avg(|s| s.bos_score),
        max_nonbos: avg(|s| s.max_nonbos),
        mean_nonbos: avg(|s| s.mean_nonbos),
        ratio: avg(|s| s.ratio),
    };
    Some(ConcentrationSummary {
        rows: stats.len(),
        pooled_ratio: mean.bos_score / mean.max_nonbos,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormStats {
    pub bos_norm: f64,
    pub mean_nonbos_norm: f64,
}

/// L2 norm of row `bos_index` and the mean norm of the other rows of `[N x D]`.
pub fn norm_stats<T: Scalar>(rows: &[T], dim: usize, bos_index: usize) -> Result<NormStats, AnalysisError> {
    if dim == 0 || !rows.len().is_multiple_of(dim) {
        return shape(format!("{} values are not rows of width {dim}", rows.len()));
    }
    let n = rows.len() / dim;
    if n < 2 {
        return Err(AnalysisError::TooFew { what: "rows", need: 2, got: n });
    }
    if bos_index >= n {
        return shape(format!("bos index {bos_index} outside {n} rows"));
    }
    let norms: Vec<f64> = rows.chunks_exact(dim).map(l2_norm_f64).collect();
    let rest: f64 = norms.iter().enumerate().filter(|&(i, _)| i != bos_index).map(|(_, x)| x).sum();
    Ok(NormStats {
        bos_norm: norms[bos_index],
        mean_nonbos_norm: rest / (n - 1) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KeyGeometry {
    /// Mean pairwise cosine among BOS rows.
    pub mean_cos_within_bos: f64,
    /// Mean cosine over all (BOS, non-BOS) pairs.
    pub mean_cos_bos_to_rest: f64,
    /// Distance between the BOS centroid and the mean of all rows.
    pub bos_centroid_to_global_mean_distance: f64,
    /// Zero rows dropped before computing the cosines.
    pub zero_rows_excluded: usize,
}

pub fn key_geometry_stats<T: Scalar>(
    keys: &[T],
    dim: usize,
    bos_rows: &BTreeSet<usize>,
) -> Result<KeyGeometry, AnalysisError> {
    if dim == 0 || !keys.len().is_multiple_of(dim) {
        return shape(format!("{} values are not rows of width {dim}", keys.len()));
    }
    let rows: Vec<&[T]> = keys.chunks_exact(dim).collect();
    if let Some(&b) = bos_rows.iter().find(|&&b| b >= rows.len()) {
        return shape(format!("bos row {b} outside {} rows", rows.len()));
    }
    let norms: Vec<f64> = rows.iter().map(|r| l2_norm_f64(r)).collect();
    let live = |i: &usize| norms[*i] > 0.0;
    let zero_rows = norms.iter().filter(|&&n| n == 0.0).count();
    if zero_rows > 0 {
        log::warn!("key geometry: excluding {zero_rows} zero rows");
    }
    let bos: Vec<usize> = bos_rows.iter().copied().filter(live).collect();
    let rest: Vec<usize> = (0..rows.len()).filter(|i| !bos_rows.contains(i)).filter(live).collect();
    if bos.len() < 2 {
        return Err(AnalysisError::TooFew { what: "non-zero BOS rows", need: 2, got: bos.len() });
    }
    if rest.len() < 2 {
        return Err(AnalysisError::TooFew { what: "non-zero non-BOS rows", need: 2, got: rest.len() });
    }
    let cos = |i: usize, j: usize| dot_f64(rows[i], rows[j]) / (norms[i] * norms[j]);

    let mut within = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in bos.iter().enumerate() {
        for &j in &bos[a + 1..] {
            within += cos(i, j);
            pairs += 1;
        }
    }
    let across: f64 = bos.iter().flat_map(|&i| rest.iter().map(move |&j| (i, j))).map(|(i, j)| cos(i, j)).sum();

    let mean_of = |idx: &mut dyn Iterator<Item = usize>, count: usize| {
        let mut m = vec![0.0f64; dim];
        for i in idx {
            for (acc, x) in m.iter_mut().zip(rows[i]) {
                *acc += x.as_f64();
            }
        }
        m.iter_mut().for_each(|x| *x /= count as f64);
        m
    };
    let bos_centroid = mean_of(&mut bos.iter().copied(), bos.len());
    let global = mean_of(&mut (0..rows.len()).filter(|i| live(i)), bos.len() + rest.len());
    let dist = bos_centroid.iter().zip(&global).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();

    Ok(KeyGeometry {
        mean_cos_within_bos: within / pairs as f64,
        mean_cos_bos_to_rest: across / (bos.len() * rest.len()) as f64,
        bos_centroid_to_global_mean_distance: dist,
        zero_rows_excluded: zero_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualMetrics {
    /// `|c| / (|r_in| + eps)`
    pub r_res: f64,
    /// `cos(c, delta_r_attn)`; 0 when either vector has no direction.
    pub a_align: f64,
    pub epsilon: f64,
    pub degenerate: bool,
}

/// Magnitude and alignment of a head's residual write `c`.
pub fn residual_metrics<T: Scalar>(
    c: &[T],
    r_in: &[T],
    delta_r_attn: &[T],
    epsilon: f64,
) -> Result<ResidualMetrics, AnalysisError> {
    if c.len() != r_in.len() || c.len() != delta_r_attn.len() {
        return shape(format!(
            "vector lengths {} / {} / {} differ",
            c.len(),
            r_in.len(),
            delta_r_attn.len()
        ));
    }
    let (cn, dn) = (l2_norm_f64(c), l2_norm_f64(delta_r_attn));
    let degenerate = cn < MIN_DIRECTION_NORM || dn < MIN_DIRECTION_NORM;
    let a_align = if degenerate {
        0.0
    } else {
        (dot_f64(c, delta_r_attn) / (cn * dn)).clamp(-1.0, 1.0)
    };
    Ok(ResidualMetrics {
        r_res: cn / (l2_norm_f64(r_in) + epsilon),
        a_align,
        epsilon,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub alpha0: f64,
    /// `1 - alpha0`
    pub delta: f64,
    pub epsilon_v: f64,
    pub v0_norm: f64,
    /// Largest value norm excluding the first token.
    pub v_max: f64,
    pub u_norm: f64,
    /// `epsilon_v + delta * v_max`
    pub bound: f64,
    pub holds: bool,
    /// `|v_0| <= epsilon_v`; when false the bound is not implied.
    pub precondition_met: bool,
}

/// Evaluates `u = sum_i w_i v_i` for one weight row over `[L x D]` values and
/// compares `|u|` with `epsilon_v + (1 - w_0) * V_max`.
pub fn check_update_bound<T: Scalar>(
    weight_row: &[T],
    values: &[T],
    dim: usize,
    epsilon_v: f64,
) -> Result<BoundReport, AnalysisError> {
    let len = weight_row.len();
    if len < 2 || dim == 0 || values.len() != len * dim {
        return shape(format!("{len} weights vs {} values of width {dim}", values.len()));
    }
    let mut u = vec![0.0f64; dim];
    for (&w, v) in weight_row.iter().zip(values.chunks_exact(dim)) {
        for (acc, &x) in u.iter_mut().zip(v) {
            *acc += w.as_f64() * x.as_f64();
        }
    }
    let norms: Vec<f64> = values.chunks_exact(dim).map(l2_norm_f64).collect();
    let v_max = norms[1..].iter().copied().fold(0.0, f64::max);
    let alpha0 = weight_row[0].as_f64();
    let delta = 1.0 - alpha0;
    let bound = epsilon_v + delta * v_max;
    let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(BoundReport {
        alpha0,
        delta,
        epsilon_v,
        v0_norm: norms[0],
        v_max,
        u_norm,
        bound,
        holds: u_norm <= bound + BOUND_SLACK,
        precondition_met: norms[0] <= epsilon_v,
    })
}
