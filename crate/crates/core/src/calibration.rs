//! Length-adaptive threshold calibration.
//!
//! Scores are collected with skipping disabled, the threshold realizing the
//! target skip ratio is solved per context length, and a cubic in the
//! normalized length `x = L / max(L)` is fitted through those points by least
//! squares. The result is a [`ThresholdProfile`] stored as JSON.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROFILE_VERSION: u32 = 1;
pub const DEFAULT_GAMMA: f64 = 0.65;
pub const DEFAULT_TARGET_SKIP: f64 = 0.60;
pub const DEFAULT_SAMPLES: usize = 50;
pub const DEFAULT_EXCLUDED_LAYERS: [usize; 2] = [0, 1];

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("empty score population")]
    EmptyPopulation,
    #[error("rank-deficient cubic design: {distinct} distinct x values, need at least 4")]
    RankDeficient { distinct: usize },
    #[error("singular normal equations")]
    Singular,
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("profile parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("score collection failed: {0}")]
    Collect(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub length: u64,
    pub tau: f64,
    pub skip: f64,
}

/// Cubic threshold curve plus the data it was fitted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdProfile {
    pub version: u32,
    pub gamma: f64,
    pub target_skip: f64,
    pub length_normalizer: f64,
    /// `[a, b, c, d]` of `a x^3 + b x^2 + c x + d`.
    pub coefficients: [f64; 4],
    pub clamp: [f64; 2],
    pub excluded_layers: Vec<usize>,
    pub calibration_points: Vec<CalibrationPoint>,
}

const PROFILE_KEYS: [&str; 8] = [
    "version",
    "gamma",
    "target_skip",
    "length_normalizer",
    "coefficients",
    "clamp",
    "excluded_layers",
    "calibration_points",
];

impl ThresholdProfile {
    /// Length-independent threshold `tau` with default clamp `[0, 1]`.
    pub fn constant(tau: f64) -> Self {
        Self {
            version: PROFILE_VERSION,
            gamma: DEFAULT_GAMMA,
            target_skip: DEFAULT_TARGET_SKIP,
            length_normalizer: 1.0,
            coefficients: [0.0, 0.0, 0.0, tau],
            clamp: [0.0, 1.0],
            excluded_layers: DEFAULT_EXCLUDED_LAYERS.to_vec(),
            calibration_points: Vec::new(),
        }
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = [lo, hi];
        self
    }

    pub fn with_excluded_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.excluded_layers = layers.into_iter().collect();
        self
    }

    /// Raw cubic at normalized length `x`, before clamping.
    pub fn cubic(&self, x: f64) -> f64 {
        let [a, b, c, d] = self.coefficients;
        ((a * x + b) * x + c) * x + d
    }

    /// `tau(L) = clamp(cubic(L / length_normalizer))`.
    pub fn tau(&self, length: usize) -> f64 {
        let x = length as f64 / self.length_normalizer;
        self.cubic(x).clamp(self.clamp[0], self.clamp[1])
    }

    pub fn excluded(&self) -> BTreeSet<usize> {
        self.excluded_layers.iter().copied().collect()
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: String| Err(CalibrationError::InvalidProfile(m));
        if self.version != PROFILE_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.target_skip > 0.0 && self.target_skip < 1.0) {
            return bad(format!("target_skip {} outside (0, 1)", self.target_skip));
        }
        if !(self.length_normalizer > 0.0 && self.length_normalizer.is_finite()) {
            return bad(format!("length_normalizer {} must be positive", self.length_normalizer));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        if !(self.clamp[0] <= self.clamp[1]) {
            return bad(format!("clamp {:?} is not an interval", self.clamp));
        }
        let lengths: BTreeSet<u64> = self.calibration_points.iter().map(|p| p.length).collect();
        if lengths.len() != self.calibration_points.len() {
            return bad("calibration_points repeat a length".into());
        }
        Ok(())
    }
}

/// Parses profile JSON. Unknown top-level keys are returned (and logged)
/// rather than rejected.
pub fn parse_profile(text: &str) -> Result<(ThresholdProfile, Vec<String>), CalibrationError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CalibrationError::Parse {
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    let unknown: Vec<String> = value
        .as_object()
        .map(|o| {
            o.keys()
                .filter(|k| !PROFILE_KEYS.contains(&k.as_str()))
                .cloned()
                .collect()
        })
        .unwrap_or_default();
    for k in &unknown {
        log::warn!("ignoring unknown profile key `{k}`");
    }
    let profile: ThresholdProfile = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        // Missing keys surface at the enclosing object; name the key itself.
        let field = message
            .strip_prefix("missing field `")
            .and_then(|m| m.split('`').next())
            .map(str::to_string)
            .unwrap_or(path);
        CalibrationError::Parse { field, message }
    })?;
    profile.validate()?;
    Ok((profile, unknown))
}

pub fn save_profile(path: impl AsRef<Path>, profile: &ThresholdProfile) -> Result<(), CalibrationError> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(profile).expect("profile serializes");
    fs::write(path, json).map_err(|source| CalibrationError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<ThresholdProfile, CalibrationError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CalibrationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_profile(&text).map(|(p, _)| p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreSample {
    pub layer: usize,
    pub length: usize,
    pub score: f64,
}

/// Group scores observed during calibration decode steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScorePopulation {
    pub samples: Vec<ScoreSample>,
}

impl ScorePopulation {
    pub fn from_scores(length: usize, scores: impl IntoIterator<Item = f64>) -> Self {
        Self {
            samples: scores
                .into_iter()
                .map(|score| ScoreSample { layer: 0, length, score })
                .collect(),
        }
    }

    pub fn push(&mut self, layer: usize, length: usize, score: f64) {
        self.samples.push(ScoreSample { layer, length, score });
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.score)
    }

    /// Samples whose layer is not in `excluded`.
    pub fn without_layers(&self, excluded: &BTreeSet<usize>) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .filter(|s| !excluded.contains(&s.layer))
                .copied()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub skip: f64,
}

/// Fraction of scores strictly above `tau`.
pub fn skip_ratio(pop: &ScorePopulation, tau: f64) -> Result<f64, CalibrationError> {
    if pop.is_empty() {
        return Err(CalibrationError::EmptyPopulation);
    }
    Ok(pop.scores().filter(|&s| s > tau).count() as f64 / pop.len() as f64)
}

pub fn sweep(pop: &ScorePopulation, thresholds: &[f64]) -> Result<Vec<SweepPoint>, CalibrationError> {
    if pop.is_empty() {
        return Err(CalibrationError::EmptyPopulation);
    }
    let mut sorted: Vec<f64> = pop.scores().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&tau| {
            let at_or_below = sorted.partition_point(|&s| s <= tau);
            SweepPoint {
                tau,
                skip: (sorted.len() - at_or_below) as f64 / n,
            }
        })
        .collect())
}

/// Lower empirical `(1 - target_skip)` quantile: with sorted scores
/// `s_1 <= .. <= s_n` and `k = round(target_skip * n)` this is `s_(n-k)`, so
/// exactly the `k` largest scores sit strictly above it when there are no ties.
pub fn solve_threshold(pop: &ScorePopulation, target_skip: f64) -> Result<f64, CalibrationError> {
    if pop.is_empty() {
        return Err(CalibrationError::EmptyPopulation);
    }
    let mut sorted: Vec<f64> = pop.scores().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((target_skip.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    Ok(if k == n {
        sorted[0].next_down()
    } else {
        sorted[n - 1 - k]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CubicFit {
    /// `[a, b, c, d]`
    pub coefficients: [f64; 4],
    /// Sum of squared residuals.
    pub sse: f64,
}

impl CubicFit {
    pub fn eval(&self, x: f64) -> f64 {
        let [a, b, c, d] = self.coefficients;
        ((a * x + b) * x + c) * x + d
    }
}

/// Least-squares cubic through `(x, y)` points via the 4x4 normal equations,
/// solved by Gaussian elimination with partial pivoting.
pub fn fit_cubic(points: &[(f64, f64)]) -> Result<CubicFit, CalibrationError> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 4 {
        return Err(CalibrationError::RankDeficient { distinct: xs.len() });
    }
    let basis = |x: f64| [x * x * x, x * x, x, 1.0];
    let mut a = [[0.0f64; 5]; 4];
    for &(x, y) in points {
        let phi = basis(x);
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] += phi[i] * phi[j];
            }
            a[i][4] += phi[i] * y;
        }
    }
    let coefficients = solve_augmented(a)?;
    let fit = CubicFit { coefficients, sse: 0.0 };
    let sse = points.iter().map(|&(x, y)| (fit.eval(x) - y).powi(2)).sum();
    Ok(CubicFit { coefficients, sse })
}

#[allow(clippy::needless_range_loop)]
fn solve_augmented(mut a: [[f64; 5]; 4]) -> Result<[f64; 4], CalibrationError> {
    let scale = a.iter().flat_map(|r| r[..4].iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() <= scale * 1e-14 {
            return Err(CalibrationError::Singular);
        }
        a.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..5 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = [0.0; 4];
    for i in (0..4).rev() {
        let s: f64 = (i + 1..4).map(|j| a[i][j] * x[j]).sum();
        x[i] = (a[i][4] - s) / a[i][i];
    }
    Ok(x)
}

/// Produces observation-mode group scores at a given context length.
pub trait ScoreSource {
    /// Runs `samples` decode steps at `length` with skipping disabled.
    fn collect_scores(&mut self, length: usize, samples: usize) -> Result<ScorePopulation, CalibrationError>;
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub lengths: Vec<usize>,
    pub target_skip: f64,
    pub gamma: f64,
    pub samples: usize,
    pub excluded_layers: Vec<usize>,
    pub clamp: [f64; 2],
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            lengths: Vec::new(),
            target_skip: DEFAULT_TARGET_SKIP,
            gamma: DEFAULT_GAMMA,
            samples: DEFAULT_SAMPLES,
            excluded_layers: DEFAULT_EXCLUDED_LAYERS.to_vec(),
            clamp: [0.0, 1.0],
        }
    }
}

/// One row of the calibration table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub length: usize,
    pub tau_solved: f64,
    pub skip_solved: f64,
    pub tau_fitted: f64,
    pub skip_fitted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub profile: ThresholdProfile,
    pub fit: CubicFit,
    pub rows: Vec<CalibrationRow>,
}

pub fn calibrate(source: &mut dyn ScoreSource, opts: &CalibrationOptions) -> Result<Calibration, CalibrationError> {
    let distinct: BTreeSet<usize> = opts.lengths.iter().copied().collect();
    if distinct.len() < 4 {
        return Err(CalibrationError::RankDeficient { distinct: distinct.len() });
    }
    let excluded: BTreeSet<usize> = opts.excluded_layers.iter().copied().collect();
    let normalizer = *distinct.iter().next_back().unwrap() as f64;

    let mut pops = Vec::with_capacity(distinct.len());
    let mut points = Vec::with_capacity(distinct.len());
    for &length in &distinct {
        let pop = source.collect_scores(length, opts.samples)?.without_layers(&excluded);
        let tau = solve_threshold(&pop, opts.target_skip)?;
        let skip = skip_ratio(&pop, tau)?;
        points.push(CalibrationPoint { length: length as u64, tau, skip });
        pops.push(pop);
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.length as f64 / normalizer, p.tau)).collect();
    let fit = fit_cubic(&xy)?;
    let profile = ThresholdProfile {
        version: PROFILE_VERSION,
        gamma: opts.gamma,
        target_skip: opts.target_skip,
        length_normalizer: normalizer,
        coefficients: fit.coefficients,
        clamp: opts.clamp,
        excluded_layers: excluded.iter().copied().collect(),
        calibration_points: points.clone(),
    };
    profile.validate()?;
    let rows = points
        .iter()
        .zip(&pops)
        .map(|(p, pop)| {
            let tau_fitted = profile.tau(p.length as usize);
            Ok(CalibrationRow {
                length: p.length as usize,
                tau_solved: p.tau,
                skip_solved: p.skip,
                tau_fitted,
                skip_fitted: skip_ratio(pop, tau_fitted)?,
            })
        })
        .collect::<Result<_, CalibrationError>>()?;
    Ok(Calibration { profile, fit, rows })
}
