use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sinkskip_core::analysis::{
    concentration_stats, key_geometry_stats, norm_stats, oracle_labels, residual_metrics, summarize_concentration,
    LabelMode, DEFAULT_RESIDUAL_EPS,
};
use sinkskip_core::bench::{run_bench, BenchOptions, DEFAULT_MLP_MULT, DEFAULT_STEPS, DEFAULT_WARMUP};
use sinkskip_core::calibration::{
    calibrate, load_profile, save_profile, CalibrationOptions, DEFAULT_GAMMA, DEFAULT_SAMPLES, DEFAULT_TARGET_SKIP,
};
use sinkskip_core::evaluate::{default_tau_grid, evaluate, observe_snapshot, observe_workload, DEFAULT_SHUFFLE_SEEDS};
use sinkskip_core::router::DEFAULT_NUM_SPLITS;
use sinkskip_core::selftest::{run_selftest, Fault, SelftestOptions};
use sinkskip_core::tensor::{read_tensor, write_tensor, Tensor};
use sinkskip_core::workload::{SyntheticWorkload, WorkloadScores, WorkloadSpec};
use sinkskip_core::{KvCacheF32, RoutingConfig, ThresholdProfile};

#[derive(Parser)]
#[command(name = "sinkskip", version, about = "Anchor-routed GQA decode: calibration, benchmarks and diagnostics")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Threshold profile JSON (written by `calibrate`, read by the others).
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    /// Worker threads for attention; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    hq: usize,
    #[arg(long, default_value_t = 4)]
    hkv: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.6)]
    plant_sink_frac: f64,
    /// Lowest planted query/anchor cosine.
    #[arg(long, default_value_t = 0.6)]
    alignment: f64,
    /// Mid-range raise of the planted cosine floor.
    #[arg(long, default_value_t = 0.0)]
    length_shift: f64,
}

impl WorkloadArgs {
    fn spec(&self, lengths: &[usize], seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            num_layers: self.layers,
            num_q_heads: self.hq,
            num_kv_heads: self.hkv,
            head_dim: self.dim,
            lengths: lengths.to_vec(),
            steps: 1,
            planted_sink_frac: self.plant_sink_frac,
            alignment: self.alignment,
            length_shift: self.length_shift,
            seed,
        }
    }
}

/// Routing settings used when no `--profile` is given.
#[derive(Args, Clone)]
struct RoutingArgs {
    /// Constant threshold.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Layers that always attend, comma separated, or `none`.
    #[arg(long, default_value = "0,1")]
    exclude_layers: String,
    #[arg(long, default_value_t = DEFAULT_NUM_SPLITS)]
    splits: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a length-dependent threshold profile on a synthetic workload.
    Calibrate {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, required = true, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_TARGET_SKIP)]
        target_skip: f64,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value = "0,1")]
        exclude_layers: String,
    },
    /// Dense versus routed decode latency and KV traffic.
    Bench {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        routing: RoutingArgs,
        #[arg(long, value_delimiter = ',', default_value = "8192")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        #[arg(long, default_value_t = DEFAULT_STEPS)]
        steps: usize,
        /// MLP width multiple for the non-attention path; 0 disables it.
        #[arg(long, default_value_t = DEFAULT_MLP_MULT)]
        mlp_mult: usize,
    },
    /// Precision/recall of the anchor score against full-attention labels.
    RouteEval {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[command(flatten)]
        routing: RoutingArgs,
        #[arg(long, value_delimiter = ',', default_value = "1024")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        /// Replay a cache snapshot directory instead of the synthetic workload.
        #[arg(long, requires = "queries")]
        snapshot: Option<PathBuf>,
        /// SNKT queries `[layers, H_q, D]` or `[steps, layers, H_q, D]` for `--snapshot`.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Also write the first length's cache and step-0 queries here.
        #[arg(long, conflicts_with = "snapshot")]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SHUFFLE_SEEDS)]
        shuffles: usize,
    },
    /// Statistics tables from SNKT tensor dumps.
    Analyze {
        /// Attention weights, last axis is tokens.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Values `[N, D]`.
        #[arg(long)]
        values: Option<PathBuf>,
        /// Keys `[N, D]`.
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Rows of `--keys` treated as BOS keys for the geometry table.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        bos_rows: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        bos_index: usize,
        /// Per-head residual writes `[H, d_model]`.
        #[arg(long, requires_all = ["residual_in", "residual_delta"])]
        residual_c: Option<PathBuf>,
        #[arg(long)]
        residual_in: Option<PathBuf>,
        #[arg(long)]
        residual_delta: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_RESIDUAL_EPS)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
    },
    /// Run the built-in invariant battery.
    Selftest {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Test hook: deliberately break a routing rule.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    TieBreak,
}

fn parse_layers(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.trim().parse().with_context(|| format!("bad layer index `{x}`")))
        .collect()
}

fn routing_config(common: &Common, args: &RoutingArgs) -> Result<RoutingConfig> {
    let mut cfg = match &common.profile {
        Some(p) => RoutingConfig::from_profile(load_profile(p)?),
        None => {
            let mut profile = ThresholdProfile::constant(args.tau).with_excluded_layers(parse_layers(&args.exclude_layers)?);
            profile.gamma = args.gamma;
            profile.validate()?;
            RoutingConfig::from_profile(profile)
        }
    };
    cfg.num_splits = args.splits;
    Ok(cfg)
}

fn write_rows<S: Serialize>(dir: &Path, name: &str, rows: &[S], format: Format) -> Result<PathBuf> {
    let path = match format {
        Format::Json => {
            let p = dir.join(format!("{name}.json"));
            fs::write(&p, serde_json::to_string_pretty(rows)?).with_context(|| p.display().to_string())?;
            p
        }
        Format::Csv => {
            let p = dir.join(format!("{name}.csv"));
            let mut w = csv::Writer::from_path(&p).with_context(|| p.display().to_string())?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            p
        }
    };
    log::info!("wrote {}", path.display());
    Ok(path)
}

fn write_json<S: Serialize>(dir: &Path, name: &str, value: &S) -> Result<()> {
    let p = dir.join(format!("{name}.json"));
    fs::write(&p, serde_json::to_string_pretty(value)?).with_context(|| p.display().to_string())?;
    Ok(())
}

fn cmd_calibrate(
    common: &Common,
    workload: &WorkloadArgs,
    lengths: &[usize],
    target_skip: f64,
    gamma: f64,
    samples: usize,
    exclude_layers: &str,
) -> Result<()> {
    let w = SyntheticWorkload::<f32>::new(workload.spec(lengths, common.seed))?;
    let opts = CalibrationOptions {
        lengths: lengths.to_vec(),
        target_skip,
        gamma,
        samples,
        excluded_layers: parse_layers(exclude_layers)?,
        ..Default::default()
    };
    let seed_profile = ThresholdProfile::constant(0.5).with_excluded_layers(opts.excluded_layers.clone());
    let routing = RoutingConfig::from_profile(seed_profile);
    routing.validate(workload.layers)?;
    let mut source = WorkloadScores::new(&w, &routing);
    let cal = calibrate(&mut source, &opts)?;

    let profile_path = common.profile.clone().unwrap_or_else(|| common.out.join("profile.json"));
    save_profile(&profile_path, &cal.profile)?;
    write_rows(&common.out, "calibration", &cal.rows, common.format)?;

    println!("{:>10} {:>10} {:>10} {:>10} {:>10}", "length", "tau", "skip", "tau_fit", "skip_fit");
    for r in &cal.rows {
        println!(
            "{:>10} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.length, r.tau_solved, r.skip_solved, r.tau_fitted, r.skip_fitted
        );
    }
    println!("profile: {}", profile_path.display());
    Ok(())
}

fn cmd_bench(
    common: &Common,
    workload: &WorkloadArgs,
    routing: &RoutingArgs,
    lengths: &[usize],
    opts: BenchOptions,
) -> Result<()> {
    let w = SyntheticWorkload::<f32>::new(workload.spec(lengths, common.seed))?;
    let cfg = routing_config(common, routing)?;
    let rows = run_bench(&w, &cfg, lengths, &opts)?;
    // Both encodings are always written for the bench report.
    write_rows(&common.out, "bench", &rows, Format::Json)?;
    write_rows(&common.out, "bench", &rows, Format::Csv)?;
    println!(
        "{:>8} {:>10} {:>10} {:>8} {:>8} {:>14}",
        "length", "dense_ms", "routed_ms", "speedup", "skip", "kv_avoided"
    );
    for r in &rows {
        println!(
            "{:>8} {:>10.3} {:>10.3} {:>8.2} {:>8.3} {:>14}",
            r.length, r.dense_ms, r.routed_ms, r.speedup, r.skip_ratio, r.kv_floats_avoided
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    observations: usize,
    positives: usize,
    prevalence: f64,
    auprc: f64,
    best_tau: f64,
    best_f1: f64,
    shuffled_auprc_mean: f64,
    planted_agreement: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_route_eval(
    common: &Common,
    workload: &WorkloadArgs,
    routing: &RoutingArgs,
    lengths: &[usize],
    steps: usize,
    snapshot: Option<&Path>,
    queries: Option<&Path>,
    dump: Option<&Path>,
    shuffles: usize,
) -> Result<()> {
    let cfg = routing_config(common, routing)?;
    let obs = match (snapshot, queries) {
        (Some(dir), Some(q)) => {
            let cache = KvCacheF32::load_snapshot(dir)?;
            observe_snapshot(&cache, &read_tensor(q)?, &cfg)?
        }
        _ => {
            let w = SyntheticWorkload::<f32>::new(workload.spec(lengths, common.seed))?;
            if let Some(dir) = dump {
                let cache = w.build_cache(lengths[0], 0)?;
                cache.save_snapshot(dir)?;
                let q: Vec<f32> = (0..workload.layers).flat_map(|l| w.queries(lengths[0], 0, l)).collect();
                let t = Tensor::new(vec![workload.layers, workload.hq, workload.dim], q)?;
                write_tensor(dir.join("queries.snkt"), &t)?;
            }
            observe_workload(&w, &cfg, lengths, steps)?
        }
    };
    let report = evaluate(&obs, &default_tau_grid(), shuffles, common.seed).context("route evaluation")?;
    write_rows(&common.out, "pr_curve", &report.pr_curve.points, common.format)?;
    write_rows(&common.out, "f1_table", &report.f1_table, common.format)?;
    write_rows(&common.out, "observations", &obs, common.format)?;
    let summary = EvalSummary {
        observations: report.observations,
        positives: report.positives,
        prevalence: report.prevalence,
        auprc: report.auprc,
        best_tau: report.best.threshold,
        best_f1: report.best.f1,
        shuffled_auprc_mean: report.shuffled_auprc_mean,
        planted_agreement: report.planted_agreement,
    };
    write_json(&common.out, "route_eval", &summary)?;
    println!(
        "groups {} positives {} prevalence {:.4} auprc {:.4} shuffled {:.4}",
        summary.observations, summary.positives, summary.prevalence, summary.auprc, summary.shuffled_auprc_mean
    );
    println!("{:>6} {:>9} {:>9} {:>9}", "tau", "precision", "recall", "f1");
    for p in &report.f1_table {
        println!("{:>6.2} {:>9.4} {:>9.4} {:>9.4}", p.threshold, p.precision, p.recall, p.f1);
    }
    Ok(())
}

fn read_2d(path: &Path) -> Result<(Tensor<f32>, usize)> {
    let t = read_tensor(path)?;
    let width = t.row_len();
    Ok((t, width))
}

#[derive(Serialize)]
struct ConcentrationRow {
    row: usize,
    bos_score: f64,
    max_nonbos: f64,
    mean_nonbos: f64,
    ratio: f64,
    is_sink: bool,
}

#[derive(Serialize)]
struct NormRow {
    tensor: &'static str,
    bos_norm: f64,
    mean_nonbos_norm: f64,
}

#[derive(Serialize)]
struct ResidualRow {
    head: usize,
    r_res: f64,
    a_align: f64,
    degenerate: bool,
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    common: &Common,
    weights: Option<&Path>,
    values: Option<&Path>,
    keys: Option<&Path>,
    bos_rows: &[usize],
    bos_index: usize,
    residual: Option<(&Path, &Path, &Path)>,
    epsilon: f64,
    gamma: f64,
) -> Result<()> {
    if weights.is_none() && values.is_none() && keys.is_none() && residual.is_none() {
        bail!("nothing to analyze: pass --weights, --values, --keys or --residual-c");
    }
    let out = &common.out;
    if let Some(p) = weights {
        let (t, len) = read_2d(p)?;
        let mut rows = Vec::new();
        let mut stats = Vec::new();
        for (i, row) in t.rows().enumerate() {
            let s = concentration_stats(row, bos_index).with_context(|| format!("{} row {i}", p.display()))?;
            let is_sink = oracle_labels(row, 1, gamma, LabelMode::Head)
                .map(|l| l[0].is_sink)
                .unwrap_or(false);
            stats.push(s);
            rows.push(ConcentrationRow {
                row: i,
                bos_score: s.bos_score,
                max_nonbos: s.max_nonbos,
                mean_nonbos: s.mean_nonbos,
                ratio: s.ratio,
                is_sink,
            });
        }
        write_rows(out, "concentration", &rows, common.format)?;
        if let Some(sum) = summarize_concentration(&stats) {
            write_json(out, "concentration_summary", &sum)?;
            println!(
                "concentration: {} rows of {len} tokens, mean ratio {:.3}, pooled ratio {:.3}",
                sum.rows, sum.mean.ratio, sum.pooled_ratio
            );
        }
    }
    let mut norms = Vec::new();
    for (name, path) in [("values", values), ("keys", keys)] {
        if let Some(p) = path {
            let (t, d) = read_2d(p)?;
            let s = norm_stats(t.data(), d, bos_index).with_context(|| p.display().to_string())?;
            println!("{name}: bos norm {:.4}, mean other norm {:.4}", s.bos_norm, s.mean_nonbos_norm);
            norms.push(NormRow {
                tensor: name,
                bos_norm: s.bos_norm,
                mean_nonbos_norm: s.mean_nonbos_norm,
            });
        }
    }
    if !norms.is_empty() {
        write_rows(out, "norm_stats", &norms, common.format)?;
    }
    if let Some(p) = keys {
        let (t, d) = read_2d(p)?;
        let bos: BTreeSet<usize> = bos_rows.iter().copied().collect();
        match key_geometry_stats(t.data(), d, &bos) {
            Ok(g) => {
                write_rows(out, "key_geometry", &[g], common.format)?;
                println!(
                    "key geometry: within-BOS cos {:.4}, BOS-to-rest cos {:.4}",
                    g.mean_cos_within_bos, g.mean_cos_bos_to_rest
                );
            }
            Err(e) => log::warn!("key geometry skipped: {e}"),
        }
    }
    if let Some((c, r_in, delta)) = residual {
        let (c, w) = read_2d(c)?;
        let (r_in, _) = read_2d(r_in)?;
        let (delta, _) = read_2d(delta)?;
        if r_in.row_len() != w || delta.row_len() != w || r_in.num_rows() != 1 && r_in.num_rows() != c.num_rows() {
            bail!("residual tensors disagree: c {:?}, in {:?}, delta {:?}", c.dims(), r_in.dims(), delta.dims());
        }
        let rows = c
            .rows()
            .enumerate()
            .map(|(h, ch)| {
                let ri = r_in.row(if r_in.num_rows() == 1 { 0 } else { h });
                let dr = delta.row(if delta.num_rows() == 1 { 0 } else { h });
                let m = residual_metrics(ch, ri, dr, epsilon)?;
                Ok(ResidualRow {
                    head: h,
                    r_res: m.r_res,
                    a_align: m.a_align,
                    degenerate: m.degenerate,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_rows(out, "residual_metrics", &rows, common.format)?;
        println!("residual metrics: {} heads", rows.len());
    }
    Ok(())
}

fn cmd_selftest(common: &Common, instances: usize, fault: Option<FaultArg>) -> Result<bool> {
    let report = run_selftest(&SelftestOptions {
        seed: common.seed,
        instances,
        fault: fault.map(|FaultArg::TieBreak| Fault::TieBreak),
    });
    print!("{report}");
    write_rows(&common.out, "selftest", &report.checks, common.format)?;
    if !report.passed() {
        let names: Vec<_> = report.failures().map(|c| c.name).collect();
        eprintln!("failed: {}", names.join(", "));
    }
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    let common = &cli.common;
    if common.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.workers)
            .build_global()
            .context("configuring worker pool")?;
    }
    fs::create_dir_all(&common.out).with_context(|| common.out.display().to_string())?;
    match &cli.command {
        Command::Calibrate {
            workload,
            lengths,
            target_skip,
            gamma,
            samples,
            exclude_layers,
        } => cmd_calibrate(common, workload, lengths, *target_skip, *gamma, *samples, exclude_layers)?,
        Command::Bench {
            workload,
            routing,
            lengths,
            warmup,
            steps,
            mlp_mult,
        } => {
            let opts = BenchOptions {
                warmup: *warmup,
                steps: *steps,
                num_splits: routing.splits,
                mlp_mult: *mlp_mult,
                ..Default::default()
            };
            cmd_bench(common, workload, routing, lengths, opts)?
        }
        Command::RouteEval {
            workload,
            routing,
            lengths,
            steps,
            snapshot,
            queries,
            dump,
            shuffles,
        } => cmd_route_eval(
            common,
            workload,
            routing,
            lengths,
            *steps,
            snapshot.as_deref(),
            queries.as_deref(),
            dump.as_deref(),
            *shuffles,
        )?,
        Command::Analyze {
            weights,
            values,
            keys,
            bos_rows,
            bos_index,
            residual_c,
            residual_in,
            residual_delta,
            epsilon,
            gamma,
        } => {
            let residual = match (residual_c, residual_in, residual_delta) {
                (Some(c), Some(i), Some(d)) => Some((c.as_path(), i.as_path(), d.as_path())),
                _ => None,
            };
            cmd_analyze(
                common,
                weights.as_deref(),
                values.as_deref(),
                keys.as_deref(),
                bos_rows,
                *bos_index,
                residual,
                *epsilon,
                *gamma,
            )?
        }
        Command::Selftest { instances, inject_fault } => return cmd_selftest(common, *instances, *inject_fault),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
