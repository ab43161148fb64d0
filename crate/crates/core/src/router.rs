//! Pre-attention group routing.
//!
//! For every KV group the router reads only the cached anchor key, scores each
//! query head by its cosine with the anchor, averages the scores into a group
//! score and compares it with the length-dependent threshold. Sink groups
//! write zero rows and load no historical K/V; active groups run split-K
//! attention over the whole cache.

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::attention::{splitk_over_cache, AttentionError, QueryGroup};
use crate::cache::{CacheError, GroupAnchor, KvCache};
use crate::calibration::ThresholdProfile;
use crate::counters::LoadCounters;
use crate::scalar::{dot_f64, l2_norm_f64, Scalar};

/// Queries with a smaller L2 norm have no usable direction.
pub const MIN_QUERY_NORM: f64 = 1e-12;
pub const DEFAULT_NUM_SPLITS: usize = 4;

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("invalid routing config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} head scores, got {actual}")]
    Arity { expected: usize, actual: usize },
    #[error("query buffer has {actual} values, expected {expected}")]
    QueryShape { expected: usize, actual: usize },
    #[error("layer {layer} has no cached tokens")]
    EmptyLayer { layer: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Sink,
    Active,
}

/// What a score exactly equal to the threshold routes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    /// `S_g > tau` is required for Sink.
    #[default]
    Active,
    /// Fault-injection variant (`S_g >= tau`); only used by the self-test.
    Sink,
}

#[derive(Debug, Clone)]
pub struct RoutingConfig {
    /// Oracle dominance threshold on the first token's attention mass.
    pub gamma: f64,
    pub profile: ThresholdProfile,
    /// Layers that always run full attention.
    pub excluded_layers: BTreeSet<usize>,
    pub num_splits: usize,
    pub mode: ExecMode,
    pub tie_rule: TieRule,
}

/// How routing decisions are acted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Sink groups write the zero surrogate; active groups attend.
    #[default]
    Route,
    /// Decisions are reported but every group attends.
    Observe,
    /// Decisions only; no attention runs and outputs are left zero.
    ScoresOnly,
}

impl RoutingConfig {
    pub fn from_profile(profile: ThresholdProfile) -> Self {
        Self {
            gamma: profile.gamma,
            excluded_layers: profile.excluded(),
            profile,
            num_splits: DEFAULT_NUM_SPLITS,
            mode: ExecMode::Route,
            tie_rule: TieRule::Active,
        }
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), RouteError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(RouteError::InvalidConfig(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if let Some(&l) = self.excluded_layers.iter().find(|&&l| l >= num_layers) {
            return Err(RouteError::InvalidConfig(format!(
                "excluded layer {l} out of range for {num_layers} layers"
            )));
        }
        if self.num_splits == 0 {
            return Err(RouteError::InvalidConfig("num_splits must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProxyScore {
    pub cosine: f64,
    /// The query norm was below [`MIN_QUERY_NORM`]; `cosine` is reported as 0.
    pub degenerate: bool,
}

/// `cos(q, k0) = q . k0 / (|q| |k0|)`, using the cached anchor norm.
pub fn proxy_score<T: Scalar>(q: &[T], anchor: &GroupAnchor<T>) -> ProxyScore {
    let qn = l2_norm_f64(q);
    if qn <= MIN_QUERY_NORM {
        return ProxyScore { cosine: 0.0, degenerate: true };
    }
    let cosine = dot_f64(q, &anchor.k0) / (qn * anchor.k0_norm.as_f64());
    ProxyScore {
        cosine: cosine.clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Arithmetic mean of the `r` head scores of one group.
pub fn group_score(scores: &[f64], group_width: usize) -> Result<f64, RouteError> {
    if scores.len() != group_width || group_width == 0 {
        return Err(RouteError::Arity {
            expected: group_width,
            actual: scores.len(),
        });
    }
    Ok(scores.iter().sum::<f64>() / group_width as f64)
}

pub fn threshold_for_length(length: usize, profile: &ThresholdProfile) -> f64 {
    profile.tau(length.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteDecision {
    pub layer: usize,
    pub kv_head: usize,
    pub group_score: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    pub head_scores: Vec<f64>,
    pub degenerate: bool,
    /// The zero surrogate was actually written (Sink verdict in [`ExecMode::Route`]).
    pub skipped: bool,
}

fn decide(layer: usize, score: f64, length: usize, degenerate: bool, cfg: &RoutingConfig) -> (f64, Verdict) {
    let tau = threshold_for_length(length, &cfg.profile);
    let above = match cfg.tie_rule {
        TieRule::Active => score > tau,
        TieRule::Sink => score >= tau,
    };
    let sink = above && !degenerate && !cfg.excluded_layers.contains(&layer);
    (tau, if sink { Verdict::Sink } else { Verdict::Active })
}

/// Verdict for a precomputed group score.
pub fn route(layer: usize, group_score: f64, length: usize, cfg: &RoutingConfig) -> RouteDecision {
    let (threshold, verdict) = decide(layer, group_score, length, false, cfg);
    RouteDecision {
        layer,
        kv_head: 0,
        group_score,
        threshold,
        verdict,
        head_scores: Vec::new(),
        degenerate: false,
        skipped: false,
    }
}

/// Outputs of one layer's decode step.
#[derive(Debug, Clone)]
pub struct DecodeStep<T> {
    /// `[H_q x D]` head outputs before the output projection.
    pub outputs: Vec<T>,
    /// One decision per KV head; empty for the unrouted baseline.
    pub decisions: Vec<RouteDecision>,
    pub group_counters: Vec<LoadCounters>,
    pub counters: LoadCounters,
}

impl<T> DecodeStep<T> {
    pub fn skipped_groups(&self) -> usize {
        self.decisions.iter().filter(|d| d.skipped).count()
    }
}

fn check_queries<T: Scalar>(queries: &[T], cache: &KvCache<T>, layer: usize) -> Result<usize, RouteError> {
    let cfg = cache.config();
    let expected = cfg.num_q_heads * cfg.head_dim;
    if queries.len() != expected {
        return Err(RouteError::QueryShape {
            expected,
            actual: queries.len(),
        });
    }
    let len = cache.group_len(layer, 0)?;
    if len == 0 {
        return Err(RouteError::EmptyLayer { layer });
    }
    Ok(len)
}

fn assemble<T: Scalar>(
    results: Vec<(Vec<T>, Option<RouteDecision>, LoadCounters)>,
) -> DecodeStep<T> {
    let mut step = DecodeStep {
        outputs: Vec::new(),
        decisions: Vec::new(),
        group_counters: Vec::with_capacity(results.len()),
        counters: LoadCounters::default(),
    };
    for (out, decision, counters) in results {
        step.outputs.extend_from_slice(&out);
        step.decisions.extend(decision);
        step.counters += counters;
        step.group_counters.push(counters);
    }
    step
}

/// Routed attention for all KV groups of `layer`. `queries` is `[H_q x D]`
/// with the `r` heads of group `g` at rows `g*r..(g+1)*r`.
pub fn routed_decode_step<T: Scalar>(
    layer: usize,
    queries: &[T],
    cache: &KvCache<T>,
    cfg: &RoutingConfig,
) -> Result<DecodeStep<T>, RouteError> {
    let len = check_queries(queries, cache, layer)?;
    let ccfg = *cache.config();
    let (r, d) = (ccfg.group_width(), ccfg.head_dim);

    let results = (0..ccfg.num_kv_heads)
        .into_par_iter()
        .map(|g| {
            let mut counters = LoadCounters::default();
            let t0 = Instant::now();
            let anchor = cache.anchor(layer, g, &mut counters)?;
            let rows = &queries[g * r * d..(g + 1) * r * d];
            let scores: Vec<ProxyScore> = rows.chunks_exact(d).map(|q| proxy_score(q, anchor)).collect();
            let head_scores: Vec<f64> = scores.iter().map(|s| s.cosine).collect();
            let degenerate = scores.iter().any(|s| s.degenerate);
            let s_g = group_score(&head_scores, r)?;
            let group_len = cache.group_len(layer, g)?;
            let (threshold, verdict) = decide(layer, s_g, group_len, degenerate, cfg);
            let skipped = verdict == Verdict::Sink && cfg.mode == ExecMode::Route;
            counters.timings.routing += t0.elapsed();

            let out = if skipped {
                counters.groups_skipped += 1;
                vec![T::zero(); r * d]
            } else if cfg.mode == ExecMode::ScoresOnly {
                vec![T::zero(); r * d]
            } else {
                let qg = QueryGroup::new(rows, r, d)?;
                let (out, c) = splitk_over_cache(&qg, cache, layer, g, cfg.num_splits)?;
                counters += c;
                counters.groups_active += 1;
                out
            };
            let decision = RouteDecision {
                layer,
                kv_head: g,
                group_score: s_g,
                threshold,
                verdict,
                head_scores,
                degenerate,
                skipped,
            };
            Ok((out, Some(decision), counters))
        })
        .collect::<Result<Vec<_>, RouteError>>()?;
    debug_assert!(len > 0);
    Ok(assemble(results))
}

/// Unrouted baseline: split-K attention for every group, no anchor reads.
pub fn full_decode_step<T: Scalar>(
    layer: usize,
    queries: &[T],
    cache: &KvCache<T>,
    num_splits: usize,
) -> Result<DecodeStep<T>, RouteError> {
    check_queries(queries, cache, layer)?;
    let ccfg = *cache.config();
    let (r, d) = (ccfg.group_width(), ccfg.head_dim);
    let results = (0..ccfg.num_kv_heads)
        .into_par_iter()
        .map(|g| {
            let rows = &queries[g * r * d..(g + 1) * r * d];
            let qg = QueryGroup::new(rows, r, d)?;
            let (out, mut c) = splitk_over_cache(&qg, cache, layer, g, num_splits)?;
            c.groups_active += 1;
            Ok((out, None, c))
        })
        .collect::<Result<Vec<_>, RouteError>>()?;
    Ok(assemble(results))
}
