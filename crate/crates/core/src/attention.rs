//! Decode-step attention for one KV group.
//!
//! Three kernels compute the same quantity, `softmax(scale * q K^T) V` for the
//! `G` query heads that share a KV head:
//!
//! * [`dense_attention`]: two-pass reference with an exact softmax.
//! * [`online_attention`]: one pass over contiguous blocks with a running max,
//!   normalizer and accumulator.
//! * [`splitk_attention`]: the token axis is cut into `num_splits` chunks,
//!   each chunk produces a [`SplitPartial`] on its own worker and the
//!   partials are joined by a log-sum-exp merge.

use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::cache::{CacheError, KvCache};
use crate::counters::LoadCounters;
use crate::scalar::{dot, Scalar};

/// Tokens per block inside a split-K chunk.
pub const DEFAULT_BLOCK: usize = 64;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("num_splits {num_splits} invalid for {len} tokens")]
    InvalidSplits { num_splits: usize, len: usize },
    #[error("block size must be at least 1")]
    InvalidBlock,
    #[error("no non-empty partials to merge")]
    EmptyPartials,
    #[error(transparent)]
    Cache(#[from] CacheError),
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T, AttentionError> {
    Err(AttentionError::Shape(msg.into()))
}

/// `G` query rows of width `D` that share one KV head.
#[derive(Debug, Clone, Copy)]
pub struct QueryGroup<'a, T> {
    q: &'a [T],
    heads: usize,
    dim: usize,
    scale: T,
}

impl<'a, T: Scalar> QueryGroup<'a, T> {
    /// Group with the standard `1/sqrt(D)` logit scale.
    pub fn new(q: &'a [T], heads: usize, dim: usize) -> Result<Self, AttentionError> {
        let scale = T::one() / T::of(dim as f64).sqrt();
        Self::with_scale(q, heads, dim, scale)
    }

    pub fn with_scale(q: &'a [T], heads: usize, dim: usize, scale: T) -> Result<Self, AttentionError> {
        if heads == 0 || dim == 0 {
            return shape_err("query group needs at least one head and a positive dim");
        }
        if q.len() != heads * dim {
            return shape_err(format!(
                "query buffer has {} values, expected {heads} x {dim}",
                q.len()
            ));
        }
        if !(scale > T::zero()) {
            return shape_err("logit scale must be positive");
        }
        Ok(Self { q, heads, dim, scale })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn row(&self, h: usize) -> &'a [T] {
        &self.q[h * self.dim..(h + 1) * self.dim]
    }

    /// Token count implied by a `[L x D]` buffer.
    fn tokens_in(&self, keys: &[T], values: Option<&[T]>) -> Result<usize, AttentionError> {
        if !keys.len().is_multiple_of(self.dim) {
            return shape_err(format!("key buffer of {} is not a multiple of D={}", keys.len(), self.dim));
        }
        if let Some(v) = values {
            if v.len() != keys.len() {
                return shape_err(format!("{} key values vs {} value values", keys.len(), v.len()));
            }
        }
        Ok(keys.len() / self.dim)
    }
}

/// Softmax rows `[G x L]` of the scaled logits.
pub fn attention_weights<T: Scalar>(qg: &QueryGroup<'_, T>, keys: &[T]) -> Result<Vec<T>, AttentionError> {
    let len = qg.tokens_in(keys, None)?;
    if len == 0 {
        return shape_err("attention over zero tokens");
    }
    let d = qg.dim;
    let mut w = Vec::with_capacity(qg.heads * len);
    for h in 0..qg.heads {
        let q = qg.row(h);
        let row_start = w.len();
        w.extend(keys.chunks_exact(d).map(|k| qg.scale * dot(q, k)));
        let row = &mut w[row_start..];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum = sum + *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    Ok(w)
}

/// Two-pass reference attention. Output is `[G x D]`.
pub fn dense_attention<T: Scalar>(
    qg: &QueryGroup<'_, T>,
    keys: &[T],
    values: &[T],
) -> Result<Vec<T>, AttentionError> {
    let len = qg.tokens_in(keys, Some(values))?;
    let w = attention_weights(qg, keys)?;
    let d = qg.dim;
    let mut out = vec![T::zero(); qg.heads * d];
    for h in 0..qg.heads {
        let o = &mut out[h * d..(h + 1) * d];
        for (&a, v) in w[h * len..(h + 1) * len].iter().zip(values.chunks_exact(d)) {
            for (o, &v) in o.iter_mut().zip(v) {
                *o = *o + a * v;
            }
        }
    }
    Ok(out)
}

/// Online-softmax state for one contiguous chunk of tokens.
///
/// `m` is the running max of the scaled logits, `l` the normalizer relative
/// to `m` and `acc` the un-normalized weighted value sum, per query head.
/// An empty chunk has `tokens == 0`, `l == 0` and is skipped by the merge.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPartial<T> {
    pub heads: usize,
    pub dim: usize,
    pub tokens: usize,
    pub m: Vec<T>,
    pub l: Vec<T>,
    pub acc: Vec<T>,
}

impl<T: Scalar> SplitPartial<T> {
    pub fn empty(heads: usize, dim: usize) -> Self {
        Self {
            heads,
            dim,
            tokens: 0,
            m: vec![T::zero(); heads],
            l: vec![T::zero(); heads],
            acc: vec![T::zero(); heads * dim],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens == 0
    }

    /// Runs the online softmax over `keys`/`values` in blocks of `block_size` tokens.
    pub fn compute(
        qg: &QueryGroup<'_, T>,
        keys: &[T],
        values: &[T],
        block_size: usize,
    ) -> Result<Self, AttentionError> {
        if block_size == 0 {
            return Err(AttentionError::InvalidBlock);
        }
        let len = qg.tokens_in(keys, Some(values))?;
        let (g, d) = (qg.heads, qg.dim);
        let mut part = Self::empty(g, d);
        if len == 0 {
            return Ok(part);
        }
        let mut logits = vec![T::zero(); block_size.min(len)];
        for (kb, vb) in keys.chunks(block_size * d).zip(values.chunks(block_size * d)) {
            let n = kb.len() / d;
            for h in 0..g {
                let q = qg.row(h);
                let mut block_max = T::neg_infinity();
                for (x, k) in logits[..n].iter_mut().zip(kb.chunks_exact(d)) {
                    *x = qg.scale * dot(q, k);
                    block_max = block_max.max(*x);
                }
                let (m_old, l_old) = (part.m[h], part.l[h]);
                let m_new = if part.tokens == 0 { block_max } else { m_old.max(block_max) };
                let acc = &mut part.acc[h * d..(h + 1) * d];
                let mut l_new = T::zero();
                if part.tokens > 0 {
                    let rescale = (m_old - m_new).exp();
                    l_new = l_old * rescale;
                    if rescale != T::one() {
                        acc.iter_mut().for_each(|a| *a = *a * rescale);
                    }
                }
                for (&x, v) in logits[..n].iter().zip(vb.chunks_exact(d)) {
                    let p = (x - m_new).exp();
                    l_new = l_new + p;
                    for (a, &v) in acc.iter_mut().zip(v) {
                        *a = *a + p * v;
                    }
                }
                part.m[h] = m_new;
                part.l[h] = l_new;
            }
            part.tokens += n;
        }
        Ok(part)
    }

    /// `acc / l` per head.
    pub fn finalize(&self) -> Vec<T> {
        let d = self.dim;
        let mut out = self.acc.clone();
        for (h, o) in out.chunks_exact_mut(d).enumerate() {
            let l = self.l[h];
            o.iter_mut().for_each(|x| *x = *x / l);
        }
        out
    }

    /// Log-sum-exp combination of two partial states.
    pub fn combine(&self, other: &Self) -> Result<Self, AttentionError> {
        check_compatible(self, other)?;
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.is_empty() {
            return Ok(other.clone());
        }
        let d = self.dim;
        let mut out = Self::empty(self.heads, d);
        out.tokens = self.tokens + other.tokens;
        for h in 0..self.heads {
            let m = self.m[h].max(other.m[h]);
            let (wa, wb) = ((self.m[h] - m).exp(), (other.m[h] - m).exp());
            out.m[h] = m;
            out.l[h] = self.l[h] * wa + other.l[h] * wb;
            let r = h * d..(h + 1) * d;
            for ((o, &a), &b) in out.acc[r.clone()].iter_mut().zip(&self.acc[r.clone()]).zip(&other.acc[r]) {
                *o = a * wa + b * wb;
            }
        }
        Ok(out)
    }
}

fn check_compatible<T>(a: &SplitPartial<T>, b: &SplitPartial<T>) -> Result<(), AttentionError> {
    if a.heads != b.heads || a.dim != b.dim {
        return shape_err(format!(
            "partials disagree on shape: {}x{} vs {}x{}",
            a.heads, a.dim, b.heads, b.dim
        ));
    }
    Ok(())
}

/// Joins partial states: `m* = max m_j`, `l* = sum l_j exp(m_j - m*)`,
/// output `= sum acc_j exp(m_j - m*) / l*`. Empty partials are skipped.
pub fn merge_partials<T: Scalar>(parts: &[SplitPartial<T>]) -> Result<Vec<T>, AttentionError> {
    let first = parts.first().ok_or(AttentionError::EmptyPartials)?;
    for p in parts {
        check_compatible(first, p)?;
    }
    let live: Vec<&SplitPartial<T>> = parts.iter().filter(|p| !p.is_empty()).collect();
    if live.is_empty() {
        return Err(AttentionError::EmptyPartials);
    }
    let (g, d) = (first.heads, first.dim);
    let mut out = vec![T::zero(); g * d];
    for h in 0..g {
        let m_star = live.iter().map(|p| p.m[h]).fold(T::neg_infinity(), T::max);
        let mut l_star = T::zero();
        let o = &mut out[h * d..(h + 1) * d];
        for p in &live {
            let w = (p.m[h] - m_star).exp();
            l_star = l_star + p.l[h] * w;
            for (o, &a) in o.iter_mut().zip(&p.acc[h * d..(h + 1) * d]) {
                *o = *o + a * w;
            }
        }
        o.iter_mut().for_each(|x| *x = *x / l_star);
    }
    Ok(out)
}

/// Single-pass blocked attention.
pub fn online_attention<T: Scalar>(
    qg: &QueryGroup<'_, T>,
    keys: &[T],
    values: &[T],
    block_size: usize,
) -> Result<Vec<T>, AttentionError> {
    let part = SplitPartial::compute(qg, keys, values, block_size)?;
    if part.is_empty() {
        return shape_err("attention over zero tokens");
    }
    merge_partials(std::slice::from_ref(&part))
}

/// Balanced partition of `0..len` into `num_splits` contiguous chunks; the
/// first `len % num_splits` chunks get one extra token.
pub fn chunk_ranges(len: usize, num_splits: usize) -> Vec<Range<usize>> {
    assert!(num_splits > 0);
    let base = len / num_splits;
    let extra = len % num_splits;
    let mut start = 0;
    (0..num_splits)
        .map(|i| {
            let n = base + usize::from(i < extra);
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

fn run_chunks<T, F>(
    len: usize,
    num_splits: usize,
    chunk: F,
) -> Result<(Vec<T>, LoadCounters), AttentionError>
where
    T: Scalar,
    F: Fn(Range<usize>, &mut LoadCounters) -> Result<SplitPartial<T>, AttentionError> + Sync,
{
    if num_splits == 0 || num_splits > len {
        return Err(AttentionError::InvalidSplits { num_splits, len });
    }
    let t0 = Instant::now();
    let results: Vec<(SplitPartial<T>, LoadCounters)> = chunk_ranges(len, num_splits)
        .into_par_iter()
        .map(|r| {
            let mut c = LoadCounters::default();
            chunk(r, &mut c).map(|p| (p, c))
        })
        .collect::<Result<_, _>>()?;
    let t1 = Instant::now();
    let mut counters: LoadCounters = results.iter().map(|(_, c)| *c).sum();
    let parts: Vec<SplitPartial<T>> = results.into_iter().map(|(p, _)| p).collect();
    let out = merge_partials(&parts)?;
    counters.timings.attention += t1 - t0;
    counters.timings.merge += t1.elapsed();
    Ok((out, counters))
}

/// Split-K attention over plain `[L x D]` buffers. Each chunk worker charges
/// the K and V rows it reads, so a full pass costs exactly `2 * L * D` floats.
pub fn splitk_attention<T: Scalar>(
    qg: &QueryGroup<'_, T>,
    keys: &[T],
    values: &[T],
    num_splits: usize,
) -> Result<(Vec<T>, LoadCounters), AttentionError> {
    let len = qg.tokens_in(keys, Some(values))?;
    let d = qg.dim;
    run_chunks(len, num_splits, |r, c| {
        let (k, v) = (&keys[r.start * d..r.end * d], &values[r.start * d..r.end * d]);
        c.kv_floats_loaded += (k.len() + v.len()) as u64;
        SplitPartial::compute(qg, k, v, DEFAULT_BLOCK)
    })
}

/// Split-K attention over every cached token of one group; chunk workers read
/// through [`KvCache::historical_view`]. `num_splits` is capped at the length.
pub fn splitk_over_cache<T: Scalar>(
    qg: &QueryGroup<'_, T>,
    cache: &KvCache<T>,
    layer: usize,
    kv_head: usize,
    num_splits: usize,
) -> Result<(Vec<T>, LoadCounters), AttentionError> {
    if qg.dim != cache.config().head_dim {
        return shape_err(format!("query dim {} vs cache head dim {}", qg.dim, cache.config().head_dim));
    }
    let len = cache.group_len(layer, kv_head)?;
    run_chunks(len, num_splits.clamp(1, len.max(1)), |r, c| {
        let view = cache.historical_view(layer, kv_head, r.start, r.end, c)?;
        SplitPartial::compute(qg, view.keys, view.values, DEFAULT_BLOCK)
    })
}
