//! Synthetic decode workloads with planted sink structure.
//!
//! Every `(layer, kv_head)` pair gets a random unit anchor direction `a`. The
//! anchor key is `ANCHOR_NORM * a`; later keys are small isotropic Gaussians
//! and values are standard normal except the first, which is nearly zero.
//! Query heads are built with an exact cosine `mu` to their group's anchor:
//!
//! ```text
//! q = rho * (mu * a + sqrt(1 - mu^2) * n),   n a random unit vector orthogonal to a
//! ```
//!
//! with `rho` chosen so that the first-token logit equals `LOGIT_GAIN * mu`.
//! Planted groups draw `mu` from `[floor(L), 1)` where the floor is at least
//! 0.5, which drives the first-token attention mass above 0.99. The other
//! groups draw `mu` from `[-0.05, 0)`, which keeps it below 0.1 for any
//! context of at least [`MIN_CONTEXT`] tokens.

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheConfig, CacheError, KvCache};
use crate::calibration::{CalibrationError, ScorePopulation, ScoreSource};
use crate::rng::TensorRng;
use crate::router::{routed_decode_step, ExecMode, RoutingConfig};
use crate::scalar::Scalar;

pub const MIN_CONTEXT: usize = 16;
/// First-token logit per unit of cosine.
pub const LOGIT_GAIN: f64 = 64.0;
pub const ANCHOR_NORM: f64 = 1.0;
/// Standard deviation of the logits of non-anchor keys.
pub const KEY_LOGIT_STD: f64 = 0.5;
/// Scale of the first value row.
pub const ANCHOR_VALUE_SCALE: f64 = 1e-3;
pub const UNPLANTED_COS: (f64, f64) = (-0.05, 0.0);
pub const MAX_PLANTED_FLOOR: f64 = 0.99;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub lengths: Vec<usize>,
    pub steps: usize,
    /// Fraction of `(layer, kv_head)` pairs planted as sinks; `floor(p * n)` pairs.
    pub planted_sink_frac: f64,
    /// Lower end of the planted cosine range at the ends of the length range.
    pub alignment: f64,
    /// Height of the mid-range bump added to the planted floor:
    /// `floor(L) = alignment + length_shift * 4x(1 - x)`, `x = L / max(lengths)`.
    pub length_shift: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_q_heads: 16,
            num_kv_heads: 4,
            head_dim: 64,
            lengths: vec![1024],
            steps: 8,
            planted_sink_frac: 0.6,
            alignment: 0.6,
            length_shift: 0.0,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::Invalid(m));
        CacheConfig::new(self.num_layers, self.num_q_heads, self.num_kv_heads, self.head_dim, 1)?;
        if !(0.0..=1.0).contains(&self.planted_sink_frac) {
            return bad(format!("planted_sink_frac {} outside [0, 1]", self.planted_sink_frac));
        }
        if !(self.alignment >= 0.5 && self.alignment < 1.0) {
            return bad(format!("alignment {} outside [0.5, 1)", self.alignment));
        }
        if !(self.length_shift >= 0.0) {
            return bad(format!("length_shift {} must be non-negative", self.length_shift));
        }
        if self.lengths.is_empty() {
            return bad("no context lengths".into());
        }
        if let Some(l) = self.lengths.iter().find(|&&l| l < MIN_CONTEXT) {
            return bad(format!("context length {l} below minimum {MIN_CONTEXT}"));
        }
        Ok(())
    }

    pub fn num_pairs(&self) -> usize {
        self.num_layers * self.num_kv_heads
    }

    pub fn planted_count(&self) -> usize {
        (self.planted_sink_frac * self.num_pairs() as f64).floor() as usize
    }
}

/// Stream splitter: a distinct generator per `(tag, parts...)`.
fn sub_rng(seed: u64, tag: u64, parts: &[u64]) -> TensorRng {
    let mut h = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for &p in parts {
        h = TensorRng::new(h ^ p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).next_u64();
    }
    TensorRng::new(h)
}

const TAG_LAYOUT: u64 = 1;
const TAG_PREFILL: u64 = 2;
const TAG_QUERY: u64 = 3;
const TAG_TOKEN: u64 = 4;

#[derive(Debug, Clone)]
pub struct SyntheticWorkload<T> {
    spec: WorkloadSpec,
    planted: Vec<bool>,
    anchor_dirs: Vec<Vec<f64>>,
    _elem: PhantomData<T>,
}

fn unit_gaussian(rng: &mut TensorRng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl<T: Scalar> SyntheticWorkload<T> {
    pub fn new(spec: WorkloadSpec) -> Result<Self, WorkloadError> {
        spec.validate()?;
        if spec.head_dim < 2 {
            return Err(WorkloadError::Invalid("head_dim must be at least 2".into()));
        }
        let mut rng = sub_rng(spec.seed, TAG_LAYOUT, &[]);
        let mut order: Vec<usize> = (0..spec.num_pairs()).collect();
        rng.shuffle(&mut order);
        let mut planted = vec![false; spec.num_pairs()];
        for &i in &order[..spec.planted_count()] {
            planted[i] = true;
        }
        let anchor_dirs = (0..spec.num_pairs()).map(|_| unit_gaussian(&mut rng, spec.head_dim)).collect();
        Ok(Self {
            spec,
            planted,
            anchor_dirs,
            _elem: PhantomData,
        })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn is_planted(&self, layer: usize, kv_head: usize) -> bool {
        self.planted[layer * self.spec.num_kv_heads + kv_head]
    }

    pub fn group_width(&self) -> usize {
        self.spec.num_q_heads / self.spec.num_kv_heads
    }

    fn query_norm(&self) -> f64 {
        LOGIT_GAIN * (self.spec.head_dim as f64).sqrt() / ANCHOR_NORM
    }

    fn key_std(&self) -> f64 {
        KEY_LOGIT_STD * ANCHOR_NORM / LOGIT_GAIN
    }

    /// Lowest planted cosine at context `length`.
    pub fn planted_floor(&self, length: usize) -> f64 {
        let max_len = *self.spec.lengths.iter().max().unwrap() as f64;
        let x = length as f64 / max_len;
        (self.spec.alignment + self.spec.length_shift * 4.0 * x * (1.0 - x)).min(MAX_PLANTED_FLOOR)
    }

    pub fn cache_config(&self, capacity: usize) -> Result<CacheConfig, CacheError> {
        CacheConfig::new(
            self.spec.num_layers,
            self.spec.num_q_heads,
            self.spec.num_kv_heads,
            self.spec.head_dim,
            capacity,
        )
    }

    /// Prefilled cache holding `length` tokens, with room for `extra` more.
    pub fn build_cache(&self, length: usize, extra: usize) -> Result<KvCache<T>, WorkloadError> {
        if length < MIN_CONTEXT {
            return Err(WorkloadError::Invalid(format!("context length {length} below {MIN_CONTEXT}")));
        }
        let d = self.spec.head_dim;
        let mut cache = KvCache::new(self.cache_config(length + extra)?)?;
        cache.reserve(length + extra);
        let sigma = self.key_std();
        let (mut k, mut v) = (vec![T::zero(); d], vec![T::zero(); d]);
        for layer in 0..self.spec.num_layers {
            for g in 0..self.spec.num_kv_heads {
                let mut rng = sub_rng(self.spec.seed, TAG_PREFILL, &[length as u64, layer as u64, g as u64]);
                let dir = &self.anchor_dirs[layer * self.spec.num_kv_heads + g];
                for i in 0..d {
                    k[i] = T::of(ANCHOR_NORM * dir[i]);
                    v[i] = T::of(ANCHOR_VALUE_SCALE * rng.standard_normal());
                }
                cache.append(layer, g, &k, &v)?;
                for _ in 1..length {
                    for i in 0..d {
                        k[i] = T::of(sigma * rng.standard_normal());
                        v[i] = T::of(rng.standard_normal());
                    }
                    cache.append(layer, g, &k, &v)?;
                }
            }
        }
        Ok(cache)
    }

    /// New K and V rows `[H_kv x D]` for `layer` at decode `step`.
    pub fn decode_token(&self, length: usize, step: usize, layer: usize) -> (Vec<T>, Vec<T>) {
        let n = self.spec.num_kv_heads * self.spec.head_dim;
        let mut rng = sub_rng(self.spec.seed, TAG_TOKEN, &[length as u64, step as u64, layer as u64]);
        let sigma = self.key_std();
        let k = (0..n).map(|_| T::of(sigma * rng.standard_normal())).collect();
        let v = (0..n).map(|_| T::of(rng.standard_normal())).collect();
        (k, v)
    }

    /// Query heads `[H_q x D]` for `layer` at decode `step`.
    pub fn queries(&self, length: usize, step: usize, layer: usize) -> Vec<T> {
        let d = self.spec.head_dim;
        let r = self.group_width();
        let rho = self.query_norm();
        let floor = self.planted_floor(length);
        let mut rng = sub_rng(self.spec.seed, TAG_QUERY, &[length as u64, step as u64, layer as u64]);
        let mut out = Vec::with_capacity(self.spec.num_q_heads * d);
        for g in 0..self.spec.num_kv_heads {
            let dir = &self.anchor_dirs[layer * self.spec.num_kv_heads + g];
            let (lo, hi) = if self.is_planted(layer, g) { (floor, 1.0) } else { UNPLANTED_COS };
            for _ in 0..r {
                let mu = rng.uniform_range(lo, hi);
                let mut n = unit_gaussian(&mut rng, d);
                let proj: f64 = n.iter().zip(dir).map(|(a, b)| a * b).sum();
                n.iter_mut().zip(dir).for_each(|(x, a)| *x -= proj * a);
                let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
                let perp = (1.0 - mu * mu).sqrt();
                out.extend(
                    n.iter()
                        .zip(dir)
                        .map(|(x, a)| T::of(rho * (mu * a + perp * x / nn))),
                );
            }
        }
        out
    }
}

/// Calibration score source that decodes a synthetic workload in
/// [`ExecMode::ScoresOnly`].
pub struct WorkloadScores<'a, T> {
    pub workload: &'a SyntheticWorkload<T>,
    pub routing: RoutingConfig,
}

impl<'a, T: Scalar> WorkloadScores<'a, T> {
    pub fn new(workload: &'a SyntheticWorkload<T>, routing: &RoutingConfig) -> Self {
        Self {
            workload,
            routing: routing.clone().with_mode(ExecMode::ScoresOnly),
        }
    }
}

impl<T: Scalar> ScoreSource for WorkloadScores<'_, T> {
    fn collect_scores(&mut self, length: usize, samples: usize) -> Result<ScorePopulation, CalibrationError> {
        let w = self.workload;
        let err = |e: &dyn std::fmt::Display| CalibrationError::Collect(e.to_string());
        let mut cache = w.build_cache(length, samples).map_err(|e| err(&e))?;
        let mut pop = ScorePopulation::default();
        for step in 0..samples {
            for layer in 0..w.spec.num_layers {
                let (k, v) = w.decode_token(length, step, layer);
                cache.append_layer(layer, &k, &v).map_err(|e| err(&e))?;
                let q = w.queries(length, step, layer);
                let out = routed_decode_step(layer, &q, &cache, &self.routing).map_err(|e| err(&e))?;
                for dec in out.decisions {
                    pop.push(layer, length, dec.group_score);
                }
            }
        }
        Ok(pop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_weights, QueryGroup};
    use crate::counters::LoadCounters;
    use crate::router::proxy_score;

    fn spec(p: f64) -> WorkloadSpec {
        WorkloadSpec {
            num_layers: 2,
            num_q_heads: 8,
            num_kv_heads: 4,
            head_dim: 16,
            lengths: vec![64],
            planted_sink_frac: p,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn planted_count_rounds_down() {
        let s = WorkloadSpec {
            num_layers: 8,
            num_kv_heads: 8,
            num_q_heads: 8,
            planted_sink_frac: 0.5,
            ..Default::default()
        };
        let w = SyntheticWorkload::<f32>::new(s).unwrap();
        let n = (0..8).flat_map(|l| (0..8).map(move |g| (l, g))).filter(|&(l, g)| w.is_planted(l, g)).count();
        assert_eq!(n, 32);
        let s = WorkloadSpec { planted_sink_frac: 0.3, num_layers: 1, num_kv_heads: 5, num_q_heads: 5, ..Default::default() };
        assert_eq!(s.planted_count(), 1);
    }

    #[test]
    fn validation() {
        assert!(SyntheticWorkload::<f32>::new(WorkloadSpec { planted_sink_frac: 1.5, ..spec(0.5) }).is_err());
        assert!(SyntheticWorkload::<f32>::new(WorkloadSpec { lengths: vec![8], ..spec(0.5) }).is_err());
        assert!(SyntheticWorkload::<f32>::new(WorkloadSpec { alignment: 0.3, ..spec(0.5) }).is_err());
        assert!(SyntheticWorkload::<f32>::new(WorkloadSpec { num_q_heads: 6, ..spec(0.5) }).is_err());
    }

    #[test]
    fn deterministic_from_seed() {
        let a = SyntheticWorkload::<f32>::new(spec(0.5)).unwrap();
        let b = SyntheticWorkload::<f32>::new(spec(0.5)).unwrap();
        assert_eq!(a.queries(64, 3, 1), b.queries(64, 3, 1));
        assert_eq!(a.decode_token(64, 2, 0), b.decode_token(64, 2, 0));
        assert_ne!(a.queries(64, 3, 1), a.queries(64, 4, 1));
    }

    fn first_token_mass(w: &SyntheticWorkload<f64>, length: usize) -> Vec<(bool, f64, f64)> {
        let cache = w.build_cache(length, 0).unwrap();
        let s = w.spec();
        let (r, d) = (w.group_width(), s.head_dim);
        let mut out = Vec::new();
        for layer in 0..s.num_layers {
            let q = w.queries(length, 0, layer);
            for g in 0..s.num_kv_heads {
                let mut c = LoadCounters::default();
                let view = cache.historical_view(layer, g, 0, length, &mut c).unwrap();
                let anchor = cache.anchor(layer, g, &mut c).unwrap();
                let rows = &q[g * r * d..(g + 1) * r * d];
                let qg = QueryGroup::new(rows, r, d).unwrap();
                let wts = attention_weights(&qg, view.keys).unwrap();
                for h in 0..r {
                    let cos = proxy_score(qg.row(h), anchor).cosine;
                    out.push((w.is_planted(layer, g), wts[h * length], cos));
                }
            }
        }
        out
    }

    #[test]
    fn planted_structure_holds() {
        for length in [MIN_CONTEXT, 200] {
            let w = SyntheticWorkload::<f64>::new(WorkloadSpec { lengths: vec![length], ..spec(0.5) }).unwrap();
            for (planted, alpha0, cos) in first_token_mass(&w, length) {
                if planted {
                    assert!(alpha0 > 0.99, "{alpha0}");
                    assert!(cos >= 0.6 - 1e-9);
                } else {
                    assert!(alpha0 < 0.1, "{alpha0} at {length}");
                    assert!((-0.05..0.0).contains(&cos));
                }
            }
        }
    }

    #[test]
    fn extremes_of_planted_fraction() {
        for (p, want) in [(0.0, false), (1.0, true)] {
            let w = SyntheticWorkload::<f64>::new(spec(p)).unwrap();
            assert!(first_token_mass(&w, 64).iter().all(|&(planted, a, _)| planted == want && (a > 0.65) == want));
        }
    }

    #[test]
    fn planted_floor_bumps_mid_range() {
        let w = SyntheticWorkload::<f32>::new(WorkloadSpec {
            lengths: vec![1000, 2000, 4000],
            alignment: 0.5,
            length_shift: 0.3,
            ..spec(0.75)
        })
        .unwrap();
        assert!((w.planted_floor(2000) - 0.8).abs() < 1e-12);
        assert!((w.planted_floor(4000) - 0.5).abs() < 1e-12);
        assert!(w.planted_floor(1000) < w.planted_floor(2000));
    }
}
