//! Proxy-versus-oracle evaluation of routing decisions.
//!
//! Every routed group of a decode step is observed twice: the router's anchor
//! cosine score, and the oracle label computed from full attention weights
//! (group-mean first-token mass above `gamma`). The observations feed a PR
//! curve, an F1 table over candidate thresholds, and a shuffled-label control.

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{operating_point_strict, oracle_labels, pr_curve, AnalysisError, LabelMode, OperatingPoint, PrCurve};
use crate::attention::{attention_weights, AttentionError, QueryGroup};
use crate::cache::{CacheError, KvCache};
use crate::counters::LoadCounters;
use crate::rng::TensorRng;
use crate::router::{routed_decode_step, ExecMode, RouteError, RoutingConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::workload::{SyntheticWorkload, WorkloadError};

pub const DEFAULT_SHUFFLE_SEEDS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("query tensor has dims {dims:?}; expected [steps, {layers}, {heads}, {dim}] or [{layers}, {heads}, {dim}]")]
    QueryDims {
        dims: Vec<usize>,
        layers: usize,
        heads: usize,
        dim: usize,
    },
    #[error("no routed groups were observed")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupObservation {
    pub layer: usize,
    pub kv_head: usize,
    pub length: usize,
    pub step: usize,
    pub score: f64,
    pub alpha0: f64,
    pub is_sink: bool,
    /// Ground-truth planting, when the source is synthetic.
    pub planted: Option<bool>,
}

/// Observes every routed group of `layer` for one query set.
pub fn observe_step<T: Scalar>(
    layer: usize,
    step: usize,
    queries: &[T],
    cache: &KvCache<T>,
    routing: &RoutingConfig,
) -> Result<Vec<GroupObservation>, EvalError> {
    if routing.excluded_layers.contains(&layer) {
        return Ok(Vec::new());
    }
    let cfg = routing.clone().with_mode(ExecMode::ScoresOnly);
    let decisions = routed_decode_step(layer, queries, cache, &cfg)?.decisions;
    let ccfg = cache.config();
    let (r, d) = (ccfg.group_width(), ccfg.head_dim);
    let mut out = Vec::with_capacity(decisions.len());
    for dec in decisions {
        let g = dec.kv_head;
        let length = cache.group_len(layer, g)?;
        let mut scratch = LoadCounters::default();
        let view = cache.historical_view(layer, g, 0, length, &mut scratch)?;
        let qg = QueryGroup::new(&queries[g * r * d..(g + 1) * r * d], r, d)?;
        let weights = attention_weights(&qg, view.keys)?;
        let label = oracle_labels(&weights, r, routing.gamma, LabelMode::GroupMean)?[0];
        out.push(GroupObservation {
            layer,
            kv_head: g,
            length,
            step,
            score: dec.group_score,
            alpha0: label.alpha0,
            is_sink: label.is_sink,
            planted: None,
        });
    }
    Ok(out)
}

/// Decodes `steps` tokens of a synthetic workload at each of `lengths` and
/// observes every routed group.
pub fn observe_workload<T: Scalar>(
    workload: &SyntheticWorkload<T>,
    routing: &RoutingConfig,
    lengths: &[usize],
    steps: usize,
) -> Result<Vec<GroupObservation>, EvalError> {
    let spec = workload.spec();
    routing.validate(spec.num_layers)?;
    let mut obs = Vec::new();
    for &length in lengths {
        let mut cache = workload.build_cache(length, steps)?;
        for step in 0..steps {
            for layer in 0..spec.num_layers {
                let (k, v) = workload.decode_token(length, step, layer);
                cache.append_layer(layer, &k, &v)?;
                let q = workload.queries(length, step, layer);
                for mut o in observe_step(layer, step, &q, &cache, routing)? {
                    o.planted = Some(workload.is_planted(layer, o.kv_head));
                    obs.push(o);
                }
            }
        }
    }
    Ok(obs)
}

/// Observes a recorded cache against recorded queries. `queries` is
/// `[layers, H_q, D]` for a single step or `[steps, layers, H_q, D]`.
pub fn observe_snapshot(
    cache: &KvCache<f32>,
    queries: &Tensor<f32>,
    routing: &RoutingConfig,
) -> Result<Vec<GroupObservation>, EvalError> {
    let c = cache.config();
    routing.validate(c.num_layers)?;
    let tail = [c.num_layers, c.num_q_heads, c.head_dim];
    let dims = queries.dims();
    let steps = match dims.len() {
        3 if dims == tail => 1,
        4 if dims[1..] == tail => dims[0],
        _ => {
            return Err(EvalError::QueryDims {
                dims: dims.to_vec(),
                layers: c.num_layers,
                heads: c.num_q_heads,
                dim: c.head_dim,
            })
        }
    };
    let per_layer = c.num_q_heads * c.head_dim;
    let mut obs = Vec::new();
    for step in 0..steps {
        for layer in 0..c.num_layers {
            let at = (step * c.num_layers + layer) * per_layer;
            obs.extend(observe_step(layer, step, &queries.data()[at..at + per_layer], cache, routing)?);
        }
    }
    Ok(obs)
}

/// Thresholds `0, 0.05, ..., 1`.
pub fn default_tau_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RouteEvalReport {
    pub observations: usize,
    pub positives: usize,
    pub prevalence: f64,
    pub auprc: f64,
    pub pr_curve: PrCurve,
    /// Router rule `score > tau` at each grid threshold.
    pub f1_table: Vec<OperatingPoint>,
    pub best: OperatingPoint,
    pub shuffled_auprc: Vec<f64>,
    pub shuffled_auprc_mean: f64,
    /// Agreement of oracle labels with planted structure, when known.
    pub planted_agreement: Option<f64>,
}

pub fn evaluate(
    obs: &[GroupObservation],
    tau_grid: &[f64],
    shuffle_seeds: usize,
    seed: u64,
) -> Result<RouteEvalReport, EvalError> {
    if obs.is_empty() {
        return Err(EvalError::Empty);
    }
    let scores: Vec<f64> = obs.iter().map(|o| o.score).collect();
    let labels: Vec<bool> = obs.iter().map(|o| o.is_sink).collect();
    let curve = pr_curve(&scores, &labels)?;

    let f1_table: Vec<OperatingPoint> = tau_grid
        .iter()
        .map(|&t| operating_point_strict(&scores, &labels, t))
        .collect();
    let best = *f1_table
        .iter()
        .max_by(|a, b| a.f1.total_cmp(&b.f1).then(b.threshold.total_cmp(&a.threshold)))
        .unwrap_or(&operating_point_strict(&scores, &labels, 0.5));

    let mut shuffled_auprc = Vec::with_capacity(shuffle_seeds);
    for i in 0..shuffle_seeds {
        let mut rng = TensorRng::new(seed.wrapping_add(i as u64));
        let mut perm = labels.clone();
        rng.shuffle(&mut perm);
        shuffled_auprc.push(pr_curve(&scores, &perm)?.auprc);
    }
    let shuffled_auprc_mean = if shuffle_seeds > 0 {
        shuffled_auprc.iter().sum::<f64>() / shuffle_seeds as f64
    } else {
        f64::NAN
    };

    let known: Vec<_> = obs.iter().filter_map(|o| o.planted.map(|p| p == o.is_sink)).collect();
    let planted_agreement = (!known.is_empty()).then(|| known.iter().filter(|&&b| b).count() as f64 / known.len() as f64);

    Ok(RouteEvalReport {
        observations: obs.len(),
        positives: curve.positives,
        prevalence: curve.prevalence(),
        auprc: curve.auprc,
        pr_curve: curve,
        f1_table,
        best,
        shuffled_auprc,
        shuffled_auprc_mean,
        planted_agreement,
    })
}
