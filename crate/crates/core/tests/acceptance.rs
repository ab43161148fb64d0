//! Acceptance criteria 1-8. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any failure.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use sinkskip_core::analysis::{check_update_bound, pr_curve, pr_curve_brute_force};
use sinkskip_core::attention::{dense_attention, online_attention, splitk_attention, DEFAULT_BLOCK};
use sinkskip_core::bench::{bench_length, BenchOptions};
use sinkskip_core::calibration::{
    calibrate, fit_cubic, load_profile, save_profile, CalibrationError, CalibrationOptions,
};
use sinkskip_core::evaluate::{default_tau_grid, evaluate, observe_workload};
use sinkskip_core::rng::TensorRng;
use sinkskip_core::router::{full_decode_step, routed_decode_step, Verdict};
use sinkskip_core::tensor::{read_tensor, write_tensor};
use sinkskip_core::workload::{SyntheticWorkload, WorkloadScores, WorkloadSpec};
use sinkskip_core::{CacheConfig, KvCacheF32, LoadCounters, QueryGroup, RoutingConfig, TensorF32, ThresholdProfile};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn normals(rng: &mut TensorRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.standard_normal() as f32).collect()
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn kernel_equivalence() -> Outcome {
    const LENS: [usize; 5] = [1, 7, 64, 1024, 4096];
    const DIMS: [usize; 3] = [32, 64, 128];
    const GROUPS: [usize; 3] = [1, 4, 8];
    const SPLITS: [usize; 4] = [1, 2, 4, 8];
    let start = Instant::now();
    let mut rng = TensorRng::new(1);
    let mut cases = Vec::new();
    for &l in &LENS {
        for &d in &DIMS {
            for &g in &GROUPS {
                for &s in &SPLITS {
                    cases.push((l, d, g, s));
                }
            }
        }
    }
    for _ in 0..60 {
        cases.push((LENS[rng.below(5)], DIMS[rng.below(3)], GROUPS[rng.below(3)], SPLITS[rng.below(4)]));
    }
    let mut worst = 0.0f64;
    let mut clamped = 0;
    for (i, &(l, d, g, s)) in cases.iter().enumerate() {
        let q = normals(&mut rng, g * d);
        let k = normals(&mut rng, l * d);
        let v = normals(&mut rng, l * d);
        let qg = QueryGroup::new(&q, g, d).map_err(|e| e.to_string())?;
        let dense = dense_attention(&qg, &k, &v).map_err(|e| e.to_string())?;
        let splits = s.min(l);
        clamped += usize::from(splits != s);
        let (split, _) = splitk_attention(&qg, &k, &v, splits).map_err(|e| e.to_string())?;
        let online = online_attention(&qg, &k, &v, DEFAULT_BLOCK).map_err(|e| e.to_string())?;
        let e = max_abs(&split, &dense).max(max_abs(&online, &dense));
        worst = worst.max(e);
        ensure(e <= 1e-5, || format!("case {i} L={l} D={d} G={g} splits={s}: max |diff| {e:e}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} instances (f32), max |diff| {worst:.2e}, {clamped} with splits capped at L",
        cases.len()
    ))
}

fn routing_semantics() -> Outcome {
    let mut rng = TensorRng::new(2);
    let (mut sinks, mut actives, mut excluded_seen) = (0, 0, 0);
    for step in 0..1000 {
        let layers = 3 + rng.below(2);
        let hkv = 1 + rng.below(4);
        let r = 1 + rng.below(4);
        let d = [8, 16, 32][rng.below(3)];
        let len = 1 + rng.below(96);
        let mut cache = KvCacheF32::new(CacheConfig::new(layers, hkv * r, hkv, d, len).unwrap()).unwrap();
        let layer = rng.below(layers);
        for l in 0..layers {
            for _ in 0..len {
                cache.append_layer(l, &normals(&mut rng, hkv * d), &normals(&mut rng, hkv * d)).unwrap();
            }
        }
        // About half the groups get queries leaning towards their anchor.
        let mut q = normals(&mut rng, hkv * r * d);
        let mut c = LoadCounters::default();
        for g in 0..hkv {
            if rng.below(2) == 0 {
                let a = cache.anchor(layer, g, &mut c).unwrap().k0.clone();
                let w = 1.0 + 4.0 * rng.uniform01() as f32;
                for h in 0..r {
                    let row = &mut q[(g * r + h) * d..(g * r + h + 1) * d];
                    row.iter_mut().zip(&a).for_each(|(x, &y)| *x = 0.3 * *x + w * y);
                }
            }
        }
        let tau = rng.uniform_range(-0.2, 0.8);
        let cfg = RoutingConfig::from_profile(ThresholdProfile::constant(tau).with_clamp(-1.0, 1.0));
        let out = routed_decode_step(layer, &q, &cache, &cfg).map_err(|e| e.to_string())?;
        for (dec, gc) in out.decisions.iter().zip(&out.group_counters) {
            let g = dec.kv_head;
            let span = g * r * d..(g + 1) * r * d;
            let o = &out.outputs[span.clone()];
            if layer < 2 {
                excluded_seen += 1;
                ensure(dec.verdict == Verdict::Active, || format!("step {step}: excluded layer {layer} skipped"))?;
            }
            match dec.verdict {
                Verdict::Sink => {
                    sinks += 1;
                    ensure(o.iter().all(|x| x.to_bits() == 0), || format!("step {step}: sink group {g} wrote output"))?;
                    ensure(gc.kv_floats_loaded == 0, || {
                        format!("step {step}: sink group {g} loaded {} KV floats", gc.kv_floats_loaded)
                    })?;
                }
                Verdict::Active => {
                    actives += 1;
                    let mut scratch = LoadCounters::default();
                    let view = cache.historical_view(layer, g, 0, len, &mut scratch).unwrap();
                    let qg = QueryGroup::new(&q[span], r, d).unwrap();
                    let dense = dense_attention(&qg, view.keys, view.values).unwrap();
                    let e = max_abs(o, &dense);
                    ensure(e <= 1e-5, || format!("step {step}: active group {g} differs from dense by {e:e}"))?;
                }
            }
        }
    }
    ensure(sinks > 0 && actives > 0, || format!("degenerate mix: {sinks} sink / {actives} active"))?;
    Ok(format!(
        "1000 steps, {sinks} sink and {actives} active verdicts, {excluded_seen} excluded-layer groups all active"
    ))
}

fn update_bound() -> Outcome {
    let mut rng = TensorRng::new(3);
    let mut tight = 0.0f64;
    for i in 0..1000 {
        let delta = [0.05, 0.2, 0.4][i % 3];
        let eps_v = [0.0, 0.01][(i / 3) % 2];
        let len = 2 + rng.below(512);
        let d = 1 + rng.below(128);
        let alpha0 = 1.0 - delta * rng.uniform_f64();
        let mut w: Vec<f64> = (1..len).map(|_| rng.uniform_f64().powi(4) + 1e-12).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x *= (1.0 - alpha0) / s);
        w.insert(0, alpha0);
        let mut v: Vec<f64> = (0..len * d).map(|_| rng.standard_normal()).collect();
        if i % 10 == 0 {
            // Adversarial: every value row points the same way.
            let dir: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            for row in v.chunks_exact_mut(d).skip(1) {
                row.copy_from_slice(&dir);
            }
        }
        let n0 = v[..d].iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = eps_v * rng.uniform_f64();
        v[..d].iter_mut().for_each(|x| *x *= target / n0);
        let rep = check_update_bound(&w, &v, d, eps_v).map_err(|e| e.to_string())?;
        ensure(rep.precondition_met && rep.alpha0 >= 1.0 - delta, || format!("instance {i}: setup broken"))?;
        ensure(rep.holds, || {
            format!("instance {i}: |u| = {} > bound {} (delta {delta}, eps_v {eps_v})", rep.u_norm, rep.bound)
        })?;
        if rep.bound > 0.0 {
            tight = tight.max(rep.u_norm / rep.bound);
        }
    }
    Ok(format!("1000 instances hold, tightest |u|/bound = {tight:.4}"))
}

fn calibration_closed_loop() -> Outcome {
    let lengths = vec![512, 1024, 1536, 2048, 3072, 4096];
    let w = SyntheticWorkload::<f32>::new(WorkloadSpec {
        num_layers: 6,
        num_q_heads: 16,
        num_kv_heads: 4,
        head_dim: 64,
        lengths: lengths.clone(),
        planted_sink_frac: 0.75,
        alignment: 0.5,
        length_shift: 0.3,
        seed: 4,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let opts = CalibrationOptions { lengths: lengths.clone(), samples: 50, ..Default::default() };
    let routing = RoutingConfig::from_profile(ThresholdProfile::constant(0.5));
    let cal = calibrate(&mut WorkloadScores::new(&w, &routing), &opts).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for r in &cal.rows {
        let e = (r.skip_fitted - opts.target_skip).abs();
        worst = worst.max(e);
        ensure(e <= 0.03, || format!("L={}: realized skip {:.4} (tau {:.4})", r.length, r.skip_fitted, r.tau_fitted))?;
    }
    let taus: Vec<f64> = cal.rows.iter().map(|r| r.tau_solved).collect();
    let spread = taus.iter().cloned().fold(f64::MIN, f64::max) - taus.iter().cloned().fold(f64::MAX, f64::min);
    ensure(spread > 0.05, || format!("thresholds barely move with length: {taus:?}"))?;

    let truth = [0.7, -1.3, 0.4, 0.55];
    let pts: Vec<(f64, f64)> = (1..=9)
        .map(|i| {
            let x = i as f64 / 9.0;
            (x, ((truth[0] * x + truth[1]) * x + truth[2]) * x + truth[3])
        })
        .collect();
    let fit = fit_cubic(&pts).map_err(|e| e.to_string())?;
    let coef_err = fit.coefficients.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(coef_err <= 1e-6, || format!("cubic recovery error {coef_err:e}"))?;
    let three = CalibrationOptions { lengths: vec![512, 1024, 2048], ..opts.clone() };
    ensure(
        matches!(
            calibrate(&mut WorkloadScores::new(&w, &routing), &three),
            Err(CalibrationError::RankDeficient { distinct: 3 })
        ),
        || "three lengths did not raise a rank error".into(),
    )?;
    Ok(format!(
        "{} lengths, max |skip - 0.60| = {:.2}pp, tau range {spread:.3}, cubic recovery {coef_err:.1e}",
        cal.rows.len(),
        worst * 100.0
    ))
}

fn proxy_evaluation() -> Outcome {
    let mut rng = TensorRng::new(5);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let n = 200;
        let scores: Vec<f64> = (0..n).map(|_| (rng.uniform_f64() * 50.0).floor() / 50.0).collect();
        let labels: Vec<bool> = (0..n).map(|j| j == 0 || rng.uniform_f64() < 0.3).collect();
        let fast = pr_curve(&scores, &labels).map_err(|e| e.to_string())?;
        let slow = pr_curve_brute_force(&scores, &labels).map_err(|e| e.to_string())?;
        let e = (fast.auprc - slow.auprc).abs();
        worst = worst.max(e);
        ensure(e <= 1e-9 && fast.points == slow.points, || format!("instance {i}: AUPRC {} vs {}", fast.auprc, slow.auprc))?;
    }
    let w = SyntheticWorkload::<f32>::new(WorkloadSpec {
        num_layers: 4,
        num_q_heads: 16,
        num_kv_heads: 4,
        head_dim: 64,
        lengths: vec![512, 2048],
        planted_sink_frac: 0.5,
        seed: 5,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let routing = RoutingConfig::from_profile(ThresholdProfile::constant(0.5));
    let obs = observe_workload(&w, &routing, &[512, 2048], 4).map_err(|e| e.to_string())?;
    let rep = evaluate(&obs, &default_tau_grid(), 10, 5).map_err(|e| e.to_string())?;
    let at = rep.f1_table.iter().find(|p| p.threshold == 0.5).ok_or("no tau=0.5 row")?;
    ensure(rep.auprc == 1.0, || format!("planted AUPRC {}", rep.auprc))?;
    ensure(at.precision == 1.0 && at.recall == 1.0, || format!("at tau=0.5 P={} R={}", at.precision, at.recall))?;
    ensure((rep.shuffled_auprc_mean - rep.prevalence).abs() <= 0.05, || {
        format!("shuffled AUPRC {} vs prevalence {}", rep.shuffled_auprc_mean, rep.prevalence)
    })?;
    Ok(format!(
        "200 instances within {worst:.1e}; planted AUPRC 1.0 over {} groups, P=R=1 at tau=0.5, shuffled {:.3} vs prevalence {:.3}",
        rep.observations, rep.shuffled_auprc_mean, rep.prevalence
    ))
}

fn traffic_accounting() -> Outcome {
    let (layers, hkv, r, d, len) = (4, 8, 2, 32, 777);
    let w = SyntheticWorkload::<f32>::new(WorkloadSpec {
        num_layers: layers,
        num_q_heads: hkv * r,
        num_kv_heads: hkv,
        head_dim: d,
        lengths: vec![len],
        planted_sink_frac: 0.6,
        seed: 6,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let cache = w.build_cache(len, 0).map_err(|e| e.to_string())?;
    let cfg = RoutingConfig::from_profile(ThresholdProfile::constant(0.5).with_excluded_layers([]));
    let (mut dense, mut routed) = (LoadCounters::default(), LoadCounters::default());
    for layer in 0..layers {
        let q = w.queries(len, 0, layer);
        dense += full_decode_step(layer, &q, &cache, 4).map_err(|e| e.to_string())?.counters;
        routed += routed_decode_step(layer, &q, &cache, &cfg).map_err(|e| e.to_string())?.counters;
    }
    let groups = (layers * hkv) as u64;
    let skipped = routed.groups_skipped;
    ensure(dense.kv_floats_loaded == groups * 2 * len as u64 * d as u64, || "dense traffic off".into())?;
    // (1 - s) * dense with s = skipped / groups, compared without division.
    ensure(routed.kv_floats_loaded * groups == (groups - skipped) * dense.kv_floats_loaded, || {
        format!("routed {} vs dense {} at {skipped}/{groups} skipped", routed.kv_floats_loaded, dense.kv_floats_loaded)
    })?;
    ensure(routed.anchor_floats_loaded == groups * d as u64, || "anchor traffic off".into())?;
    ensure(skipped == (0.6 * groups as f64).floor() as u64, || format!("skipped {skipped} of {groups}"))?;
    Ok(format!(
        "s = {skipped}/{groups}: routed {} = (1 - s) x dense {} floats exactly",
        routed.kv_floats_loaded, dense.kv_floats_loaded
    ))
}

fn speedup_trend() -> Outcome {
    let lengths = [8192, 131072];
    let w = SyntheticWorkload::<f32>::new(WorkloadSpec {
        num_layers: 1,
        num_q_heads: 10,
        num_kv_heads: 5,
        head_dim: 64,
        lengths: lengths.to_vec(),
        planted_sink_frac: 0.6,
        seed: 7,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = RoutingConfig::from_profile(ThresholdProfile::constant(0.5).with_excluded_layers([]));
    let opts = BenchOptions::default();
    let mut rows = Vec::new();
    for l in lengths {
        rows.push(bench_length(&w, &cfg, l, &opts).map_err(|e| e.to_string())?);
    }
    let (short, long) = (&rows[0], &rows[1]);
    let summary = format!(
        "L=8192 {:.3}/{:.3} ms ({:.2}x), L=131072 {:.3}/{:.3} ms ({:.2}x), skip {:.2}",
        short.dense_ms, short.routed_ms, short.speedup, long.dense_ms, long.routed_ms, long.speedup, long.skip_ratio
    );
    ensure(long.skip_ratio == 0.6, || format!("skip ratio {} ({summary})", long.skip_ratio))?;
    ensure(long.routed_ms < long.dense_ms, || format!("routed not faster at 131072: {summary}"))?;
    ensure(long.speedup > short.speedup, || format!("speedup does not grow with length: {summary}"))?;
    Ok(summary)
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = TensorRng::new(8);
    for i in 0..100 {
        let ndim = 1 + rng.below(4);
        let dims: Vec<usize> = (0..ndim).map(|_| 1 + rng.below(9)).collect();
        let n = dims.iter().product();
        // Arbitrary bit patterns, NaN payloads included.
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect();
        let t = TensorF32::new(dims, data).map_err(|e| e.to_string())?;
        let p = dir.path().join(format!("t{i}.snkt"));
        write_tensor(&p, &t).map_err(|e| e.to_string())?;
        let back = read_tensor(&p).map_err(|e| e.to_string())?;
        let bits_equal = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(back.dims() == t.dims() && bits_equal, || format!("tensor {i} {:?} changed", t.dims()))?;

        let mut prof = ThresholdProfile::constant(rng.uniform_f64());
        prof.coefficients = [0; 4].map(|_| rng.standard_normal() * 10f64.powi(rng.below(7) as i32 - 3));
        prof.length_normalizer = (1 + rng.below(1 << 20)) as f64;
        prof.gamma = rng.uniform_range(0.05, 0.95);
        prof.target_skip = rng.uniform_f64();
        let excluded: BTreeSet<usize> = (0..rng.below(4)).map(|_| rng.below(32)).collect();
        prof.excluded_layers = excluded.into_iter().collect();
        let pp = dir.path().join(format!("p{i}.json"));
        save_profile(&pp, &prof).map_err(|e| e.to_string())?;
        let back = load_profile(&pp).map_err(|e| e.to_string())?;
        ensure(back == prof, || format!("profile {i} changed"))?;
        let bits = |p: &ThresholdProfile| p.coefficients.map(f64::to_bits);
        ensure(bits(&back) == bits(&prof), || format!("profile {i} coefficients not bit-exact"))?;
    }
    Ok("100 SNKT files bit-exact, 100 profiles field-exact".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("kernel equivalence", kernel_equivalence),
        ("routing semantics", routing_semantics),
        ("update-norm bound", update_bound),
        ("calibration closed loop", calibration_closed_loop),
        ("proxy evaluation", proxy_evaluation),
        ("traffic accounting", traffic_accounting),
        ("speedup trend", speedup_trend),
        ("format and profile round-trips", round_trips),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = run();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
