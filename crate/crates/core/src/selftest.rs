//! Built-in invariant battery.
//!
//! Runs small randomized instances of every core contract and reports one
//! result per check. A fault can be injected to confirm the battery notices.

use std::fmt::Write as _;

use serde::Serialize;

use crate::analysis::{check_update_bound, pr_curve, pr_curve_brute_force};
use crate::attention::{dense_attention, online_attention, splitk_attention, QueryGroup};
use crate::cache::{CacheConfig, KvCache};
use crate::calibration::{parse_profile, ThresholdProfile};
use crate::counters::LoadCounters;
use crate::rng::TensorRng;
use crate::router::{full_decode_step, proxy_score, route, routed_decode_step, RoutingConfig, TieRule, Verdict};
use crate::tensor::{decode_snkt, encode_snkt, Tensor};

pub const KERNEL_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Route ties (`S_g == tau`) to Sink.
    TieBreak,
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    pub instances: usize,
    pub fault: Option<Fault>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self { seed: 0, instances: 50, fault: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn normals(rng: &mut TensorRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

fn kernel_equivalence(rng: &mut TensorRng, instances: usize) -> Result<String, String> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let len = 1 + rng.below(300);
        let d = [4, 16, 64][rng.below(3)];
        let heads = 1 + rng.below(4);
        let splits = 1 + rng.below(len.min(8));
        let block = 1 + rng.below(70);
        let q: Vec<f64> = normals(rng, heads * d).iter().map(|x| 3.0 * x).collect();
        let k = normals(rng, len * d);
        let v = normals(rng, len * d);
        let qg = QueryGroup::new(&q, heads, d).map_err(|e| e.to_string())?;
        let dense = dense_attention(&qg, &k, &v).map_err(|e| e.to_string())?;
        let online = online_attention(&qg, &k, &v, block).map_err(|e| e.to_string())?;
        let (split, c) = splitk_attention(&qg, &k, &v, splits).map_err(|e| e.to_string())?;
        if c.kv_floats_loaded != (2 * len * d) as u64 {
            return Err(format!("instance {i}: split-K charged {} floats for L={len} D={d}", c.kv_floats_loaded));
        }
        for (name, out) in [("online", &online), ("split-K", &split)] {
            let diff = out.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
            if diff > KERNEL_TOLERANCE {
                return Err(format!(
                    "instance {i}: {name} differs from dense by {diff:e} (L={len} D={d} G={heads} splits={splits})"
                ));
            }
        }
    }
    Ok(format!("{instances} instances, max |diff| {worst:e}"))
}

fn random_cache(rng: &mut TensorRng, layers: usize, hq: usize, hkv: usize, d: usize, len: usize) -> KvCache<f64> {
    let mut cache = KvCache::new(CacheConfig::new(layers, hq, hkv, d, len).unwrap()).unwrap();
    for layer in 0..layers {
        for _ in 0..len {
            let k = normals(rng, hkv * d);
            let v = normals(rng, hkv * d);
            cache.append_layer(layer, &k, &v).unwrap();
        }
    }
    cache
}

fn routing_semantics(rng: &mut TensorRng, instances: usize, tie_rule: TieRule) -> Result<String, String> {
    let (layers, hq, hkv, d) = (3, 8, 4, 8);
    let r = hq / hkv;
    let mut ties = 0;
    for i in 0..instances {
        let len = 2 + rng.below(40);
        let cache = random_cache(rng, layers, hq, hkv, d, len);
        let layer = rng.below(layers);
        let q = normals(rng, hq * d);
        let mut c = LoadCounters::default();
        let scores: Vec<f64> = (0..hkv)
            .map(|g| {
                let a = cache.anchor(layer, g, &mut c).unwrap();
                q[g * r * d..(g + 1) * r * d].chunks_exact(d).map(|h| proxy_score(h, a).cosine).sum::<f64>() / r as f64
            })
            .collect();
        // Threshold placed exactly on one group's score.
        let tie = rng.below(hkv);
        let tau = scores[tie];
        let excluded = if rng.below(2) == 0 { vec![] } else { vec![(layer + 1) % layers] };
        let mut cfg = RoutingConfig::from_profile(
            ThresholdProfile::constant(tau).with_clamp(-2.0, 2.0).with_excluded_layers(excluded),
        );
        cfg.tie_rule = tie_rule;
        let step = routed_decode_step(layer, &q, &cache, &cfg).map_err(|e| e.to_string())?;
        for dec in &step.decisions {
            let g = dec.kv_head;
            let want = if scores[g] > tau && !cfg.excluded_layers.contains(&layer) {
                Verdict::Sink
            } else {
                Verdict::Active
            };
            if dec.group_score != scores[g] {
                return Err(format!("instance {i}: group {g} score {} vs {}", dec.group_score, scores[g]));
            }
            if dec.verdict != want {
                return Err(format!(
                    "instance {i}: layer {layer} group {g} score {} tau {tau} routed {:?}, expected {want:?}",
                    dec.group_score, dec.verdict
                ));
            }
        }
        ties += 1;
        if route(layer, tau, len, &cfg).verdict == Verdict::Sink {
            return Err(format!("instance {i}: route() sends a tie at tau={tau} to Sink"));
        }
    }
    Ok(format!("{instances} steps, {ties} exact ties routed Active"))
}

fn skip_contract(rng: &mut TensorRng, instances: usize) -> Result<String, String> {
    let (layers, hq, hkv, d) = (2, 12, 4, 16);
    let r = hq / hkv;
    for i in 0..instances {
        let len = 2 + rng.below(64);
        let cache = random_cache(rng, layers, hq, hkv, d, len);
        let q = normals(rng, hq * d);
        let tau = rng.uniform_range(-0.3, 0.3);
        let cfg = RoutingConfig::from_profile(
            ThresholdProfile::constant(tau).with_clamp(-1.0, 1.0).with_excluded_layers([]),
        );
        let routed = routed_decode_step(1, &q, &cache, &cfg).map_err(|e| e.to_string())?;
        let dense = full_decode_step(1, &q, &cache, cfg.num_splits).map_err(|e| e.to_string())?;
        let mut want_kv = 0u64;
        for (dec, gc) in routed.decisions.iter().zip(&routed.group_counters) {
            let span = dec.kv_head * r * d..(dec.kv_head + 1) * r * d;
            let out = &routed.outputs[span.clone()];
            if dec.skipped {
                if gc.kv_floats_loaded != 0 || out.iter().any(|&x| x != 0.0) {
                    return Err(format!("instance {i}: skipped group {} loaded KV or wrote output", dec.kv_head));
                }
            } else {
                want_kv += (2 * len * d) as u64;
                if out != &dense.outputs[span] {
                    return Err(format!("instance {i}: active group {} differs from unrouted", dec.kv_head));
                }
            }
            if gc.anchor_floats_loaded != d as u64 {
                return Err(format!("instance {i}: anchor read charged {}", gc.anchor_floats_loaded));
            }
        }
        if routed.counters.kv_floats_loaded != want_kv {
            return Err(format!(
                "instance {i}: routed loaded {} KV floats, expected {want_kv}",
                routed.counters.kv_floats_loaded
            ));
        }
    }
    Ok(format!("{instances} steps"))
}

fn update_bound(rng: &mut TensorRng, instances: usize) -> Result<String, String> {
    let mut violations = 0;
    for i in 0..instances {
        let len = 2 + rng.below(200);
        let d = 1 + rng.below(32);
        let alpha0 = rng.uniform_range(0.5, 1.0);
        let eps_v = [0.0, 0.01][i % 2];
        let mut w: Vec<f64> = (1..len).map(|_| rng.uniform_f64() + 1e-9).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x *= (1.0 - alpha0) / s);
        w.insert(0, alpha0);
        let mut v = normals(rng, len * d);
        let n0 = v[..d].iter().map(|x| x * x).sum::<f64>().sqrt();
        v[..d].iter_mut().for_each(|x| *x *= eps_v / n0);
        let rep = check_update_bound(&w, &v, d, eps_v).map_err(|e| e.to_string())?;
        if rep.precondition_met && !rep.holds {
            violations += 1;
        }
    }
    if violations > 0 {
        return Err(format!("{violations} of {instances} instances exceed the bound"));
    }
    Ok(format!("{instances} instances"))
}

fn snkt_roundtrip(rng: &mut TensorRng, instances: usize) -> Result<String, String> {
    for i in 0..instances {
        let ndim = 1 + rng.below(4);
        let dims: Vec<usize> = (0..ndim).map(|_| 1 + rng.below(6)).collect();
        let n = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.standard_normal() as f32).collect();
        let t = Tensor::new(dims, data).map_err(|e| e.to_string())?;
        let back = decode_snkt(&encode_snkt(&t)).map_err(|e| e.to_string())?;
        if back.dims() != t.dims() || back.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("instance {i}: tensor {:?} did not round-trip", t.dims()));
        }
    }
    Ok(format!("{instances} tensors"))
}

fn profile_roundtrip(rng: &mut TensorRng, instances: usize) -> Result<String, String> {
    for i in 0..instances {
        let mut p = ThresholdProfile::constant(rng.uniform_f64());
        p.coefficients = [0, 1, 2, 3].map(|_| rng.standard_normal());
        p.length_normalizer = 1.0 + rng.below(1 << 17) as f64;
        let json = serde_json::to_string(&p).map_err(|e| e.to_string())?;
        let (back, unknown) = parse_profile(&json).map_err(|e| e.to_string())?;
        if back != p || !unknown.is_empty() {
            return Err(format!("instance {i}: profile did not round-trip"));
        }
    }
    Ok(format!("{instances} profiles"))
}

fn pr_agreement(rng: &mut TensorRng, instances: usize) -> Result<String, String> {
    for i in 0..instances {
        let n = 1 + rng.below(60);
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.below(10) as f64 / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.below(3) == 0).collect();
        labels[rng.below(n)] = true;
        let fast = pr_curve(&scores, &labels).map_err(|e| e.to_string())?;
        let slow = pr_curve_brute_force(&scores, &labels).map_err(|e| e.to_string())?;
        if (fast.auprc - slow.auprc).abs() > 1e-9 || fast.points.len() != slow.points.len() {
            return Err(format!("instance {i}: AUPRC {} vs brute force {}", fast.auprc, slow.auprc));
        }
    }
    Ok(format!("{instances} label sets"))
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let tie_rule = match opts.fault {
        Some(Fault::TieBreak) => TieRule::Sink,
        None => TieRule::Active,
    };
    let n = opts.instances.max(1);
    type Check<'a> = (&'static str, Box<dyn Fn(&mut TensorRng) -> Result<String, String> + 'a>);
    let checks: Vec<Check> = vec![
        ("kernel-equivalence", Box::new(|r| kernel_equivalence(r, n))),
        ("routing-semantics", Box::new(|r| routing_semantics(r, n, tie_rule))),
        ("skip-contract", Box::new(|r| skip_contract(r, n))),
        ("update-bound", Box::new(|r| update_bound(r, n))),
        ("snkt-roundtrip", Box::new(|r| snkt_roundtrip(r, n))),
        ("profile-roundtrip", Box::new(|r| profile_roundtrip(r, n))),
        ("pr-brute-force", Box::new(|r| pr_agreement(r, n))),
    ];
    let checks = checks
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = TensorRng::new(opts.seed.wrapping_mul(31).wrapping_add(i as u64));
            let (passed, detail) = match f(&mut rng) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail }
        })
        .collect();
    SelftestReport { checks }
}

impl std::fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        f.write_str(&s)
    }
}
