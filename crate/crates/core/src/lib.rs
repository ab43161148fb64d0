//! Decode-time grouped-query attention that skips sink-dominated KV groups.
//!
//! Each KV group keeps the key of its first cached token as an anchor. Before
//! any historical K/V is read, the cosine between the group's query heads and
//! that anchor is averaged and compared with a length-dependent threshold;
//! groups above it emit a zero output and load nothing. The crate also holds
//! the tooling around that decision: split-K reference kernels with traffic
//! counters, threshold calibration, oracle labels and proxy metrics, synthetic
//! workloads and a benchmark driver.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type for the common cases.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod bench;
pub mod cache;
pub mod calibration;
pub mod counters;
pub mod evaluate;
pub mod rng;
pub mod router;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod workload;

pub use attention::{QueryGroup, SplitPartial};
pub use cache::{CacheConfig, GroupAnchor, KvCache};
pub use calibration::ThresholdProfile;
pub use counters::LoadCounters;
pub use router::{RouteDecision, RoutingConfig, Verdict};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type KvCacheF32 = KvCache<f32>;
pub type KvCacheF64 = KvCache<f64>;
pub type GroupAnchorF32 = GroupAnchor<f32>;
pub type SplitPartialF32 = SplitPartial<f32>;
pub type SplitPartialF64 = SplitPartial<f64>;
pub type DecodeStepF32 = router::DecodeStep<f32>;

