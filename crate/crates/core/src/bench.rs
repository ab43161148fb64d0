//! Dense-versus-routed decode benchmark over a synthetic workload.
//!
//! Each measured step decodes one token through every layer twice, once with
//! unrouted split-K attention and once routed, alternating which runs first.
//! Both paths also run the same non-attention work (output projection and a
//! two-matrix MLP) so latencies are per-token rather than attention-only.
//! Active group outputs of the routed path must match the dense path.

use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::counters::{LoadCounters, PhaseTimings};
use crate::rng::TensorRng;
use crate::router::{full_decode_step, routed_decode_step, DecodeStep, ExecMode, RouteError, RoutingConfig};
use crate::scalar::{dot, Scalar};
use crate::workload::{SyntheticWorkload, WorkloadError};

pub const DEFAULT_WARMUP: usize = 4;
pub const DEFAULT_STEPS: usize = 32;
pub const DEFAULT_MLP_MULT: usize = 4;
pub const ACTIVE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench options: {0}")]
    Invalid(String),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Cache(#[from] crate::cache::CacheError),
    #[error(
        "routed output diverges from dense at L={length} step={step} layer={layer} kv_head={kv_head}: \
         max |diff| = {max_abs_diff:e} (tolerance {tolerance:e}), group score {group_score}, threshold {threshold}"
    )]
    Mismatch {
        length: usize,
        step: usize,
        layer: usize,
        kv_head: usize,
        max_abs_diff: f64,
        tolerance: f64,
        group_score: f64,
        threshold: f64,
    },
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub warmup: usize,
    pub steps: usize,
    pub num_splits: usize,
    /// MLP hidden width as a multiple of `H_q * D`; 0 disables the non-attention path.
    pub mlp_mult: usize,
    pub tolerance: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: DEFAULT_WARMUP,
            steps: DEFAULT_STEPS,
            num_splits: crate::router::DEFAULT_NUM_SPLITS,
            mlp_mult: DEFAULT_MLP_MULT,
            tolerance: ACTIVE_TOLERANCE,
        }
    }
}

/// One row per context length. Latencies are medians over measured steps, in
/// milliseconds per token (all layers).
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub length: usize,
    pub steps: usize,
    pub dense_ms: f64,
    pub routed_ms: f64,
    pub speedup: f64,
    pub dense_attention_ms: f64,
    pub routed_attention_ms: f64,
    pub attention_speedup: f64,
    pub non_attention_ms: f64,
    /// Summed worker time per token spent in each routed phase.
    pub routing_phase_ms: f64,
    pub attention_phase_ms: f64,
    pub merge_phase_ms: f64,
    /// Skipped groups over routable groups.
    pub skip_ratio: f64,
    pub kv_floats_dense: u64,
    pub kv_floats_routed: u64,
    pub kv_floats_avoided: u64,
    pub anchor_floats: u64,
    pub max_active_abs_diff: f64,
}

/// Output projection plus MLP with deterministic random weights.
struct NonAttention<T> {
    width: usize,
    hidden: usize,
    w_o: Vec<T>,
    w_up: Vec<T>,
    w_down: Vec<T>,
}

impl<T: Scalar> NonAttention<T> {
    fn new(width: usize, mult: usize, seed: u64) -> Self {
        let hidden = width * mult;
        let mut rng = TensorRng::new(seed ^ 0x6d6c_7000);
        let mut mat = |rows: usize, cols: usize| -> Vec<T> {
            let s = 1.0 / (cols as f64).sqrt();
            (0..rows * cols).map(|_| T::of(s * rng.standard_normal())).collect()
        };
        let w_o = if mult > 0 { mat(width, width) } else { Vec::new() };
        Self {
            width,
            hidden,
            w_o,
            w_up: mat(hidden, width),
            w_down: mat(width, hidden),
        }
    }

    fn matvec(m: &[T], x: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(m.chunks_exact(x.len()).map(|row| dot(row, x)));
    }

    fn run(&self, attn: &[T]) -> T {
        if self.hidden == 0 {
            return T::zero();
        }
        debug_assert_eq!(attn.len(), self.width);
        let (mut h, mut a, mut y) = (Vec::new(), Vec::new(), Vec::new());
        Self::matvec(&self.w_o, attn, &mut h);
        Self::matvec(&self.w_up, &h, &mut a);
        for x in &mut a {
            // SiLU
            *x = *x / (T::one() + (-*x).exp());
        }
        Self::matvec(&self.w_down, &a, &mut y);
        y.into_iter().fold(T::zero(), |s, v| s + v)
    }
}

fn median(xs: &mut [Duration]) -> f64 {
    xs.sort();
    let n = xs.len();
    let mid = if n % 2 == 1 {
        xs[n / 2].as_secs_f64()
    } else {
        (xs[n / 2 - 1].as_secs_f64() + xs[n / 2].as_secs_f64()) / 2.0
    };
    mid * 1e3
}

struct Timed<T> {
    attention: Duration,
    total: Duration,
    steps: Vec<DecodeStep<T>>,
}

fn run_token<T: Scalar>(
    layers: usize,
    queries: &[Vec<T>],
    na: &NonAttention<T>,
    mut attend: impl FnMut(usize, &[T]) -> Result<DecodeStep<T>, RouteError>,
) -> Result<Timed<T>, RouteError> {
    let mut attention = Duration::ZERO;
    let mut steps = Vec::with_capacity(layers);
    let mut sink = T::zero();
    let t0 = Instant::now();
    for (layer, q) in queries.iter().enumerate() {
        let ta = Instant::now();
        let out = attend(layer, q)?;
        attention += ta.elapsed();
        sink = sink + na.run(&out.outputs);
        steps.push(out);
    }
    let total = t0.elapsed();
    std::hint::black_box(sink);
    Ok(Timed { attention, total, steps })
}

/// Benchmarks one context length.
pub fn bench_length<T: Scalar>(
    workload: &SyntheticWorkload<T>,
    routing: &RoutingConfig,
    length: usize,
    opts: &BenchOptions,
) -> Result<BenchRow, BenchError> {
    if opts.steps == 0 {
        return Err(BenchError::Invalid("steps must be positive".into()));
    }
    let spec = workload.spec();
    routing.validate(spec.num_layers)?;
    let routing = routing.clone().with_mode(ExecMode::Route);
    let (layers, r, d) = (spec.num_layers, workload.group_width(), spec.head_dim);
    let na = NonAttention::<T>::new(spec.num_q_heads * d, opts.mlp_mult, spec.seed);
    let total_steps = opts.warmup + opts.steps;
    let mut cache = workload.build_cache(length, total_steps)?;

    let (mut dense_t, mut routed_t) = (Vec::new(), Vec::new());
    let (mut dense_a, mut routed_a) = (Vec::new(), Vec::new());
    let (mut dense_c, mut routed_c) = (LoadCounters::default(), LoadCounters::default());
    let mut routable = 0u64;
    let mut max_diff = 0.0f64;

    for step in 0..total_steps {
        let mut queries = Vec::with_capacity(layers);
        for layer in 0..layers {
            let (k, v) = workload.decode_token(length, step, layer);
            cache.append_layer(layer, &k, &v)?;
            queries.push(workload.queries(length, step, layer));
        }
        let dense = |c: &_| run_token(layers, &queries, &na, |l, q| full_decode_step(l, q, c, opts.num_splits));
        let routed = |c: &_| run_token(layers, &queries, &na, |l, q| routed_decode_step(l, q, c, &routing));
        let (dn, rt) = if step % 2 == 0 {
            let dn = dense(&cache)?;
            (dn, routed(&cache)?)
        } else {
            let rt = routed(&cache)?;
            (dense(&cache)?, rt)
        };

        for (layer, (ds, rs)) in dn.steps.iter().zip(&rt.steps).enumerate() {
            for dec in &rs.decisions {
                let span = dec.kv_head * r * d..(dec.kv_head + 1) * r * d;
                let (a, b) = (&ds.outputs[span.clone()], &rs.outputs[span]);
                let diff = if dec.skipped {
                    b.iter().map(|x| x.as_f64().abs()).fold(0.0, f64::max)
                } else {
                    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
                };
                if !(diff <= opts.tolerance) {
                    return Err(BenchError::Mismatch {
                        length,
                        step,
                        layer,
                        kv_head: dec.kv_head,
                        max_abs_diff: diff,
                        tolerance: opts.tolerance,
                        group_score: dec.group_score,
                        threshold: dec.threshold,
                    });
                }
                if !dec.skipped {
                    max_diff = max_diff.max(diff);
                }
            }
        }
        if step < opts.warmup {
            continue;
        }
        dense_t.push(dn.total);
        routed_t.push(rt.total);
        dense_a.push(dn.attention);
        routed_a.push(rt.attention);
        dense_c += dn.steps.iter().map(|s| s.counters).sum();
        routed_c += rt.steps.iter().map(|s| s.counters).sum();
        routable += (layers - routing.excluded_layers.len()) as u64 * spec.num_kv_heads as u64;
    }

    let n = opts.steps as f64;
    let per_token = |t: PhaseTimings| {
        (
            t.routing.as_secs_f64() * 1e3 / n,
            t.attention.as_secs_f64() * 1e3 / n,
            t.merge.as_secs_f64() * 1e3 / n,
        )
    };
    let (routing_ms, attention_ms, merge_ms) = per_token(routed_c.timings);
    let dense_ms = median(&mut dense_t);
    let routed_ms = median(&mut routed_t);
    let dense_attention_ms = median(&mut dense_a);
    let routed_attention_ms = median(&mut routed_a);
    Ok(BenchRow {
        length,
        steps: opts.steps,
        dense_ms,
        routed_ms,
        speedup: dense_ms / routed_ms,
        dense_attention_ms,
        routed_attention_ms,
        attention_speedup: dense_attention_ms / routed_attention_ms,
        non_attention_ms: (dense_ms - dense_attention_ms).max(0.0),
        routing_phase_ms: routing_ms,
        attention_phase_ms: attention_ms,
        merge_phase_ms: merge_ms,
        skip_ratio: if routable > 0 { routed_c.groups_skipped as f64 / routable as f64 } else { 0.0 },
        kv_floats_dense: dense_c.kv_floats_loaded,
        kv_floats_routed: routed_c.kv_floats_loaded,
        kv_floats_avoided: dense_c.kv_floats_loaded - routed_c.kv_floats_loaded,
        anchor_floats: routed_c.anchor_floats_loaded,
        max_active_abs_diff: max_diff,
    })
}

/// Benchmarks every length in order, dropping each cache before the next.
pub fn run_bench<T: Scalar>(
    workload: &SyntheticWorkload<T>,
    routing: &RoutingConfig,
    lengths: &[usize],
    opts: &BenchOptions,
) -> Result<Vec<BenchRow>, BenchError> {
    lengths
        .iter()
        .map(|&l| {
            let row = bench_length(workload, routing, l, opts)?;
            log::info!(
                "L={} dense {:.3} ms routed {:.3} ms speedup {:.2}x skip {:.2}",
                l,
                row.dense_ms,
                row.routed_ms,
                row.speedup,
                row.skip_ratio
            );
            Ok(row)
        })
        .collect()
}
