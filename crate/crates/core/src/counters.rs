//! KV traffic and phase timing instrumentation.
//!
//! Counters are owned per worker and summed when the workers join, so no
//! atomics are involved.

use std::ops::{Add, AddAssign};
use std::time::Duration;

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PhaseTimings {
    #[serde(serialize_with = "ser_micros")]
    pub routing: Duration,
    #[serde(serialize_with = "ser_micros")]
    pub attention: Duration,
    #[serde(serialize_with = "ser_micros")]
    pub merge: Duration,
}

fn ser_micros<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64() * 1e6)
}

impl AddAssign for PhaseTimings {
    fn add_assign(&mut self, o: Self) {
        self.routing += o.routing;
        self.attention += o.attention;
        self.merge += o.merge;
    }
}

/// Floats moved from the KV cache plus routing outcomes for one unit of work.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LoadCounters {
    /// Historical K and V floats read (both matrices counted).
    pub kv_floats_loaded: u64,
    pub anchor_floats_loaded: u64,
    pub groups_active: u64,
    pub groups_skipped: u64,
    pub timings: PhaseTimings,
}

impl LoadCounters {
    /// Equality on everything except wall-clock fields.
    pub fn same_traffic(&self, other: &Self) -> bool {
        self.kv_floats_loaded == other.kv_floats_loaded
            && self.anchor_floats_loaded == other.anchor_floats_loaded
            && self.groups_active == other.groups_active
            && self.groups_skipped == other.groups_skipped
    }

    pub fn kv_bytes_loaded(&self) -> u64 {
        self.kv_floats_loaded * 4
    }
}

impl AddAssign for LoadCounters {
    fn add_assign(&mut self, o: Self) {
        self.kv_floats_loaded += o.kv_floats_loaded;
        self.anchor_floats_loaded += o.anchor_floats_loaded;
        self.groups_active += o.groups_active;
        self.groups_skipped += o.groups_skipped;
        self.timings += o.timings;
    }
}

impl Add for LoadCounters {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl std::iter::Sum for LoadCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}
