//! Grouped-query KV cache with per-group initial-token anchors.
//!
//! Storage is one contiguous `[len x D]` K and V buffer per `(layer, kv_head)`.
//! The first appended key of every group is additionally kept as a
//! [`GroupAnchor`] together with its L2 norm, so routing can run without
//! touching the historical rows.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counters::LoadCounters;
use crate::scalar::{l2_norm_f64, Scalar};
use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};

/// Keys with a smaller norm than this cannot serve as an anchor.
pub const MIN_ANCHOR_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("invalid cache config: {0}")]
    InvalidConfig(String),
    #[error("cache overflow at layer {layer}, kv head {kv_head}: capacity {capacity} tokens")]
    Overflow {
        layer: usize,
        kv_head: usize,
        capacity: usize,
    },
    #[error("degenerate anchor at layer {layer}, kv head {kv_head}: first key has L2 norm {norm:e}")]
    DegenerateAnchor {
        layer: usize,
        kv_head: usize,
        norm: f64,
    },
    #[error("group (layer {layer}, kv head {kv_head}) out of range")]
    GroupOutOfRange { layer: usize, kv_head: usize },
    #[error("vector length {actual} does not match head dim {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("group (layer {layer}, kv head {kv_head}) is empty")]
    Empty { layer: usize, kv_head: usize },
    #[error("token range {from}..{to} outside 0..{len}")]
    RangeOutOfBounds { from: usize, to: usize, len: usize },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    /// Capacity in tokens per group.
    pub capacity: usize,
}

impl CacheConfig {
    pub fn new(
        num_layers: usize,
        num_q_heads: usize,
        num_kv_heads: usize,
        head_dim: usize,
        capacity: usize,
    ) -> Result<Self, CacheError> {
        let cfg = Self {
            num_layers,
            num_q_heads,
            num_kv_heads,
            head_dim,
            capacity,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CacheError> {
        let bad = |m: &str| Err(CacheError::InvalidConfig(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be positive");
        }
        if self.num_kv_heads == 0 || self.num_q_heads == 0 {
            return bad("head counts must be positive");
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return bad("query head count must be a multiple of the kv head count");
        }
        if self.head_dim == 0 {
            return bad("head_dim must be positive");
        }
        if self.capacity == 0 {
            return bad("capacity must be positive");
        }
        Ok(())
    }

    /// Query heads per KV group.
    pub fn group_width(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn num_groups(&self) -> usize {
        self.num_layers * self.num_kv_heads
    }
}

/// First cached key of a group and its L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAnchor<T> {
    pub k0: Vec<T>,
    pub k0_norm: T,
}

impl<T: Scalar> GroupAnchor<T> {
    fn capture(k: &[T]) -> Option<Self> {
        let norm = l2_norm_f64(k);
        (norm >= MIN_ANCHOR_NORM).then(|| Self {
            k0: k.to_vec(),
            k0_norm: T::of(norm),
        })
    }
}

#[derive(Debug, Clone)]
struct GroupStore<T> {
    keys: Vec<T>,
    values: Vec<T>,
    anchor: Option<GroupAnchor<T>>,
}

/// Contiguous K/V rows `[from, to)` of one group.
#[derive(Debug, Clone, Copy)]
pub struct KvView<'a, T> {
    pub keys: &'a [T],
    pub values: &'a [T],
    pub head_dim: usize,
}

impl<T> KvView<'_, T> {
    pub fn tokens(&self) -> usize {
        self.keys.len() / self.head_dim
    }
}

#[derive(Debug, Clone)]
pub struct KvCache<T> {
    config: CacheConfig,
    groups: Vec<GroupStore<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        config.validate()?;
        let groups = (0..config.num_groups())
            .map(|_| GroupStore {
                keys: Vec::new(),
                values: Vec::new(),
                anchor: None,
            })
            .collect();
        Ok(Self { config, groups })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    fn index(&self, layer: usize, kv_head: usize) -> Result<usize, CacheError> {
        if layer >= self.config.num_layers || kv_head >= self.config.num_kv_heads {
            return Err(CacheError::GroupOutOfRange { layer, kv_head });
        }
        Ok(layer * self.config.num_kv_heads + kv_head)
    }

    /// Token count of one group.
    pub fn group_len(&self, layer: usize, kv_head: usize) -> Result<usize, CacheError> {
        let g = &self.groups[self.index(layer, kv_head)?];
        Ok(g.keys.len() / self.config.head_dim)
    }

    /// Token count of a layer; every group of a layer has the same length
    /// after a full-model append.
    pub fn len(&self, layer: usize) -> usize {
        self.group_len(layer, 0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.groups.iter().all(|g| g.keys.is_empty())
    }

    /// Pre-allocates room for `tokens` more rows in every group.
    pub fn reserve(&mut self, tokens: usize) {
        let d = self.config.head_dim;
        for g in &mut self.groups {
            g.keys.reserve(tokens * d);
            g.values.reserve(tokens * d);
        }
    }

    pub fn append(
        &mut self,
        layer: usize,
        kv_head: usize,
        k: &[T],
        v: &[T],
    ) -> Result<(), CacheError> {
        let d = self.config.head_dim;
        for len in [k.len(), v.len()] {
            if len != d {
                return Err(CacheError::DimMismatch {
                    expected: d,
                    actual: len,
                });
            }
        }
        let idx = self.index(layer, kv_head)?;
        let capacity = self.config.capacity;
        let g = &mut self.groups[idx];
        if g.keys.len() / d >= capacity {
            return Err(CacheError::Overflow {
                layer,
                kv_head,
                capacity,
            });
        }
        if g.anchor.is_none() {
            g.anchor = Some(GroupAnchor::capture(k).ok_or(CacheError::DegenerateAnchor {
                layer,
                kv_head,
                norm: l2_norm_f64(k),
            })?);
        }
        g.keys.extend_from_slice(k);
        g.values.extend_from_slice(v);
        Ok(())
    }

    /// Appends one token for every kv head of `layer`; `ks`/`vs` are `[H_kv x D]`.
    pub fn append_layer(&mut self, layer: usize, ks: &[T], vs: &[T]) -> Result<(), CacheError> {
        let d = self.config.head_dim;
        let h = self.config.num_kv_heads;
        if ks.len() != h * d || vs.len() != h * d {
            return Err(CacheError::DimMismatch {
                expected: h * d,
                actual: ks.len().min(vs.len()),
            });
        }
        for kv_head in 0..h {
            let r = kv_head * d..(kv_head + 1) * d;
            self.append(layer, kv_head, &ks[r.clone()], &vs[r])?;
        }
        Ok(())
    }

    /// Anchor of a group. Charges `D` floats to `counters.anchor_floats_loaded`.
    pub fn anchor(
        &self,
        layer: usize,
        kv_head: usize,
        counters: &mut LoadCounters,
    ) -> Result<&GroupAnchor<T>, CacheError> {
        let a = self.groups[self.index(layer, kv_head)?]
            .anchor
            .as_ref()
            .ok_or(CacheError::Empty { layer, kv_head })?;
        counters.anchor_floats_loaded += self.config.head_dim as u64;
        Ok(a)
    }

    /// Rows `[from, to)` of K and V. Charges `2 * (to - from) * D` floats.
    pub fn historical_view(
        &self,
        layer: usize,
        kv_head: usize,
        from: usize,
        to: usize,
        counters: &mut LoadCounters,
    ) -> Result<KvView<'_, T>, CacheError> {
        let d = self.config.head_dim;
        let g = &self.groups[self.index(layer, kv_head)?];
        let len = g.keys.len() / d;
        if from > to || to > len {
            return Err(CacheError::RangeOutOfBounds { from, to, len });
        }
        counters.kv_floats_loaded += 2 * ((to - from) * d) as u64;
        Ok(KvView {
            keys: &g.keys[from * d..to * d],
            values: &g.values[from * d..to * d],
            head_dim: d,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotManifest {
    version: u32,
    config: CacheConfig,
    /// Token count per group, layer-major.
    lengths: Vec<usize>,
}

fn snapshot_file(dir: &Path, kind: char, layer: usize, kv_head: usize) -> PathBuf {
    dir.join(format!("{kind}_l{layer}_h{kv_head}.snkt"))
}

impl KvCache<f32> {
    /// Writes `manifest.json` plus one `[len x D]` SNKT tensor per group and matrix.
    pub fn save_snapshot(&self, dir: impl AsRef<Path>) -> Result<(), CacheError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| CacheError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let d = self.config.head_dim;
        let mut lengths = Vec::with_capacity(self.groups.len());
        for layer in 0..self.config.num_layers {
            for kv_head in 0..self.config.num_kv_heads {
                let g = &self.groups[self.index(layer, kv_head)?];
                let len = g.keys.len() / d;
                lengths.push(len);
                if len == 0 {
                    continue;
                }
                let k = Tensor::new(vec![len, d], g.keys.clone())?;
                let v = Tensor::new(vec![len, d], g.values.clone())?;
                write_tensor(snapshot_file(dir, 'k', layer, kv_head), &k)?;
                write_tensor(snapshot_file(dir, 'v', layer, kv_head), &v)?;
            }
        }
        let manifest = SnapshotManifest {
            version: 1,
            config: self.config,
            lengths,
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CacheError::Snapshot(e.to_string()))?;
        fs::write(&path, json).map_err(|source| CacheError::Io { path, source })
    }

    /// Rebuilds a cache by replaying the stored rows through [`KvCache::append`].
    pub fn load_snapshot(dir: impl AsRef<Path>) -> Result<Self, CacheError> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|source| CacheError::Io {
            path: path.clone(),
            source,
        })?;
        let manifest: SnapshotManifest = serde_json::from_str(&text)
            .map_err(|e| CacheError::Snapshot(format!("{}: {e}", path.display())))?;
        let mut cache = KvCache::new(manifest.config)?;
        if manifest.lengths.len() != manifest.config.num_groups() {
            return Err(CacheError::Snapshot(format!(
                "manifest lists {} group lengths, config has {} groups",
                manifest.lengths.len(),
                manifest.config.num_groups()
            )));
        }
        let d = manifest.config.head_dim;
        for layer in 0..manifest.config.num_layers {
            for kv_head in 0..manifest.config.num_kv_heads {
                let len = manifest.lengths[cache.index(layer, kv_head)?];
                if len == 0 {
                    continue;
                }
                let k = read_tensor(snapshot_file(dir, 'k', layer, kv_head))?;
                let v = read_tensor(snapshot_file(dir, 'v', layer, kv_head))?;
                for t in [&k, &v] {
                    if t.dims() != [len, d] {
                        return Err(CacheError::Snapshot(format!(
                            "group ({layer}, {kv_head}): expected dims [{len}, {d}], found {:?}",
                            t.dims()
                        )));
                    }
                }
                for (kr, vr) in k.rows().zip(v.rows()) {
                    cache.append(layer, kv_head, kr, vr)?;
                }
            }
        }
        Ok(cache)
    }
}
