//! Command-line interface: simulate datasets, fit models, smooth states,
//! diagnose runs, and orchestrate desk-scale experiment reproductions.
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O
//! error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use dsem_kalman::compile::{compile_participant, CompileOptions};
use dsem_kalman::data::Dataset;
use dsem_kalman::diagnostics::{
    efficiency_report, summarize_param, EfficiencyRow, RHAT_LOOSE, RHAT_STRICT,
};
use dsem_kalman::error::Error;
use dsem_kalman::kalman::{filter_univariate, smooth, Obs};
use dsem_kalman::model::{
    load_model_with_overrides, presets::PresetOptions, save_model, ModelSpec,
};
use dsem_kalman::posterior::{
    fd_gradient, MarginalTarget, Parameterization, PosteriorOpts, Target,
};
use dsem_kalman::runio::{read_run, sha256_hex, write_diagnostics, write_run, Manifest, StoredRun};
use dsem_kalman::samplers::{
    run_experiment, InitStrategy, MassMatrix, RunOutcome, SamplerConfig, SamplerKind,
};
use dsem_kalman::simgen::{simulate, SimConfig};
use dsem_kalman::Result;

#[derive(Parser)]
#[command(name = "dsemk", version, about = "Multilevel latent time-series models in state space form: exact marginal likelihoods and gradient-based Bayesian estimation")]
struct Cli {
    /// JSON config file with default flag values (explicit flags win).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for chain- and participant-level parallelism
    /// (default: DSEMK_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a model preset or file.
    Simulate(SimulateArgs),
    /// Fit a model to data with the chosen sampler.
    Fit(FitArgs),
    /// Recover smoothed latent-state summaries from a finished run.
    Smooth(SmoothArgs),
    /// Compute convergence diagnostics for a run directory.
    Diagnose(DiagnoseArgs),
    /// Orchestrate simulate -> fit (each sampler) -> diagnose over replicates.
    Reproduce(ReproduceArgs),
    /// Compare the reverse-mode gradient against central finite differences.
    CheckGrad(CheckGradArgs),
    /// Dump the compiled state space matrices at a reference point.
    DumpSsm(DumpSsmArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Model file path or preset name (eg1..eg5 or full names).
    #[arg(long)]
    model: String,
    /// Preset structure overrides, e.g. "indicators=3" or "p=2".
    #[arg(long, default_value = "")]
    preset_overrides: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    missing_rate: f64,
    /// Maximum modulus for the stationarity rejection.
    #[arg(long, default_value_t = 0.95)]
    max_modulus: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "")]
    preset_overrides: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    sampler: String,
    #[arg(long)]
    chains: Option<usize>,
    /// Total iterations per chain, warm-up included.
    #[arg(long)]
    iter: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
    #[arg(long)]
    max_treedepth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initialization: random | prior | preset | path to a JSON name->value map.
    #[arg(long, default_value = "random")]
    init: String,
    /// Between-level parameterization: non-centered (default) | centered.
    #[arg(long, default_value = "non-centered")]
    parameterization: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SmoothArgs {
    /// Run directory produced by `fit`.
    #[arg(long)]
    run: PathBuf,
    /// "mean" or a comma-separated list of pooled draw indices.
    #[arg(long, default_value = "mean")]
    draws: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Run directory.
    run: PathBuf,
    /// Comma-separated parameter names (default: all static parameters).
    #[arg(long)]
    params: Option<String>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Experiment preset (eg1..eg5).
    #[arg(long)]
    experiment: String,
    /// Fraction of the preset's default N and T.
    #[arg(long, default_value_t = 0.2)]
    scale: f64,
    #[arg(long)]
    replicates: usize,
    /// Indicator counts to sweep for eg3 (comma separated).
    #[arg(long)]
    indicators: Option<String>,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 1000)]
    iter: usize,
    #[arg(long, default_value_t = 500)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Samplers to compare (comma separated).
    #[arg(long, default_value = "nuts-kalman,nuts-joint,rwm-collapsed")]
    samplers: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "")]
    preset_overrides: String,
    /// Data file; a small dataset is simulated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    t: usize,
}

#[derive(Args)]
struct DumpSsmArgs {
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "")]
    preset_overrides: String,
    /// Participant index (1-based; matters only through covariates).
    #[arg(long, default_value_t = 1)]
    participant: usize,
    /// Timepoint (1-based).
    #[arg(long, default_value_t = 1)]
    timepoint: usize,
    /// Evaluate at the preset truth instead of the zero reference point.
    #[arg(long, default_value_t = false)]
    at_truth: bool,
}

fn main() {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("DSEMK_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().ok();
    }
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    let defaults = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args, &defaults, cli.threads.unwrap_or(0)).map(|_| ()),
        Command::Smooth(args) => cmd_smooth(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Reproduce(args) => cmd_reproduce(args, &defaults),
        Command::CheckGrad(args) => cmd_check_grad(args),
        Command::DumpSsm(args) => cmd_dump_ssm(args),
    }
}

#[derive(Default, serde::Deserialize)]
struct ConfigDefaults {
    chains: Option<usize>,
    iter: Option<usize>,
    warmup: Option<usize>,
    target_accept: Option<f64>,
    max_treedepth: Option<usize>,
    seed: Option<u64>,
}

fn load_config(path: Option<&Path>) -> Result<ConfigDefaults> {
    match path {
        None => Ok(ConfigDefaults::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("config file: {e}")))
        }
    }
}

fn load_spec(model: &str, overrides: &str) -> Result<ModelSpec> {
    let opts = PresetOptions::parse(overrides)?;
    load_model_with_overrides(model, &opts)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let spec = load_spec(&args.model, &args.preset_overrides)?;
    let mut sc = SimConfig::for_spec(&spec);
    if let Some(n) = args.n {
        sc.n = n;
    }
    if let Some(t) = args.t {
        sc.t_len = t;
    }
    sc.seed = args.seed;
    sc.missing_rate = args.missing_rate;
    sc.max_modulus = args.max_modulus;
    let out = simulate(&spec, &sc)?;
    std::fs::create_dir_all(&args.out)?;
    out.data.write_csv(&args.out.join("data.csv"))?;
    std::fs::write(args.out.join("truth.json"), serde_json::to_string_pretty(&out.truth)?)?;
    std::fs::write(args.out.join("sim_config.json"), serde_json::to_string_pretty(&sc)?)?;
    println!(
        "simulated {} participants x {} timepoints ({} observed values) -> {}",
        sc.n,
        sc.t_len,
        out.data.observed_total(),
        args.out.display()
    );
    Ok(())
}

fn parse_init(init: &str, spec: &ModelSpec) -> Result<InitStrategy> {
    match init {
        "random" => Ok(InitStrategy::RandomUniform),
        "prior" => Ok(InitStrategy::PriorDraw),
        "preset" => Ok(InitStrategy::Explicit(spec.presets.init.clone())),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Validation(format!("--init must be random|prior|preset|file ({e})"))
            })?;
            let map: BTreeMap<String, f64> = serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("init file: {e}")))?;
            Ok(InitStrategy::Explicit(map))
        }
    }
}

fn cmd_fit(args: FitArgs, defaults: &ConfigDefaults, threads: usize) -> Result<PathBuf> {
    let spec = load_spec(&args.model, &args.preset_overrides)?;
    let data = Dataset::read_csv(&args.data, spec.dims.u, spec.within.x1_dim())?;
    let kind: SamplerKind = args.sampler.parse()?;
    let cfg = SamplerConfig {
        chains: args.chains.or(defaults.chains).unwrap_or(4),
        iterations: args.iter.or(defaults.iter).unwrap_or(2000),
        warmup: args.warmup.or(defaults.warmup).unwrap_or(1000),
        target_accept: args.target_accept.or(defaults.target_accept).unwrap_or(0.95),
        max_treedepth: args.max_treedepth.or(defaults.max_treedepth).unwrap_or(15),
        mass_matrix: MassMatrix::DiagonalAdapted,
        seed: args.seed.or(defaults.seed).unwrap_or(1),
        init: parse_init(&args.init, &spec)?,
    };
    let mut opts = PosteriorOpts::default();
    opts.parameterization = match args.parameterization.as_str() {
        "non-centered" => Parameterization::NonCentered,
        "centered" => Parameterization::Centered,
        other => {
            return Err(Error::Validation(format!(
                "unknown parameterization '{other}' (non-centered | centered)"
            )))
        }
    };
    let outcome = run_experiment(&spec, &data, kind, &cfg, opts)?;
    let model_json = save_model(&spec);
    let manifest = Manifest {
        command: std::env::args().collect::<Vec<_>>().join(" "),
        sampler: kind,
        model_name: args.model.clone(),
        model_hash: sha256_hex(model_json.as_bytes()),
        data_path: args.data.display().to_string(),
        data_hash: sha256_hex(&std::fs::read(&args.data)?),
        config: cfg,
        threads,
        packed_dim: outcome.names.len(),
        param_names: outcome.names.clone(),
        wall_warmup_s: outcome.chains.iter().map(|c| c.wall_warmup_s).collect(),
        wall_sampling_s: outcome.chains.iter().map(|c| c.wall_sampling_s).collect(),
        elapsed_s: outcome.elapsed_s,
        divergences: outcome.chains.iter().map(|c| c.divergence_count).collect(),
        treedepth_hits: outcome
            .chains
            .iter()
            .map(|c| c.treedepth_hit.iter().filter(|&&h| h).count())
            .collect(),
    };
    write_run(&args.out, &manifest, &model_json, &outcome)?;
    // Default diagnostics over the static parameters.
    let rows = diagnose_rows(&outcome, &spec.theta_names())?;
    write_diagnostics(&args.out, &rows)?;
    let max_rhat = rows.iter().map(|r| r.rhat).fold(0.0f64, f64::max);
    println!(
        "{} finished: {} chains x {} draws, {:.1}s wall, {} divergences, max rhat {:.4} -> {}",
        kind,
        manifest.config.chains,
        manifest.config.iterations - manifest.config.warmup,
        outcome.elapsed_s,
        outcome.total_divergences(),
        max_rhat,
        args.out.display()
    );
    Ok(args.out)
}

fn diagnose_rows(
    outcome: &RunOutcome,
    params: &[String],
) -> Result<Vec<dsem_kalman::diagnostics::ParamDiagnostics>> {
    params
        .iter()
        .map(|name| {
            let chains = outcome.param_chains(name)?;
            summarize_param(name, &chains)
        })
        .collect()
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let run = read_run(&args.run)?;
    let params: Vec<String> = match &args.params {
        Some(spec) => spec.split(',').map(|s| s.trim().to_string()).collect(),
        None => run
            .names
            .iter()
            .filter(|n| {
                !n.starts_with("eta2.") && !n.starts_with("eta3.") && !n.starts_with("eta1.")
            })
            .cloned()
            .collect(),
    };
    let mut rows = Vec::new();
    for name in &params {
        let chains = run.param_chains(name)?;
        rows.push(summarize_param(name, &chains)?);
    }
    write_diagnostics(&run.dir, &rows)?;
    println!(
        "{:<24} {:>8} {:>10} {:>10} {:>12} {:>12}",
        "param", "rhat", "bulk_ess", "tail_ess", "mean", "sd"
    );
    for r in &rows {
        println!(
            "{:<24} {:>8.4} {:>10.1} {:>10.1} {:>12.5} {:>12.5}",
            r.name, r.rhat, r.bulk_ess, r.tail_ess, r.mean, r.sd
        );
    }
    Ok(())
}

fn cmd_smooth(args: SmoothArgs) -> Result<()> {
    let run = read_run(&args.run)?;
    let spec = dsem_kalman::model::load_model_str(&std::fs::read_to_string(
        run.dir.join("model.json"),
    )?)?;
    let data = Dataset::read_csv(
        Path::new(&run.manifest.data_path),
        spec.dims.u,
        spec.within.x1_dim(),
    )?;
    let selected: Vec<Vec<f64>> = if args.draws == "mean" {
        vec![run.mean_vector()]
    } else {
        let idx: std::result::Result<Vec<usize>, _> =
            args.draws.split(',').map(|s| s.trim().parse::<usize>()).collect();
        let idx = idx.map_err(|_| Error::Validation("bad --draws index list".into()))?;
        idx.into_iter().map(|i| run.draw(i)).collect::<Result<Vec<_>>>()?
    };
    let smoothed = smoothed_state_summary(&spec, &data, &run, &selected)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("smoothed.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io(e.to_string()))?;
    w.write_record(["id", "t", "component", "mean", "sd"])
        .map_err(|e| Error::Io(e.to_string()))?;
    for row in &smoothed {
        w.write_record([
            row.0.to_string(),
            row.1.to_string(),
            row.2.to_string(),
            format!("{:.8e}", row.3),
            format!("{:.8e}", row.4),
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    println!("smoothed state summaries -> {}", path.display());
    Ok(())
}

/// Re-realize parameters at the selected draws and average the smoothed
/// moments (law of total variance across draws).
fn smoothed_state_summary(
    spec: &ModelSpec,
    data: &Dataset,
    run: &StoredRun,
    selected: &[Vec<f64>],
) -> Result<Vec<(i64, usize, usize, f64, f64)>> {
    use dsem_kalman::model::{between_noncentered, between_y_contribution};
    let target = MarginalTarget::new(spec, data, PosteriorOpts::default())?;
    let packing = &target.packing;
    if selected.iter().any(|x| x.len() != run.names.len()) {
        return Err(Error::Validation("draw length mismatch".into()));
    }
    let v1 = spec.dims.v1;
    let mut acc_mean = vec![0.0f64; data.n * data.t_len * v1];
    let mut acc_second = vec![0.0f64; data.n * data.t_len * v1];
    for x in selected {
        let theta: Vec<f64> = x[..packing.n_theta].to_vec();
        let bt = &spec.between_timepoint;
        let mut eta3: Vec<Vec<f64>> = Vec::new();
        let mut y3: Vec<Vec<f64>> = Vec::new();
        if let Some(bt) = bt {
            for t in 0..data.t_len {
                let x3 = if bt.x_dim() == 0 { &[][..] } else { bt.covariate_row(t) };
                let (mean, factor) = between_noncentered(bt, 1.0f64, &theta, x3);
                let raw = &x[packing.eta3_range(t)];
                let mut eta = mean;
                for (j, &k) in packing.v3_free.iter().enumerate() {
                    for row in 0..eta.len() {
                        eta[row] += factor[(row, k)] * raw[j];
                    }
                }
                y3.push(between_y_contribution(bt, 1.0f64, &theta, &eta, x3));
                eta3.push(eta);
            }
        }
        let bp = &spec.between_participant;
        for i in 0..data.n {
            let x2 = if bp.x_dim() == 0 { &[][..] } else { bp.covariate_row(i) };
            let (mean2, factor2) = between_noncentered(bp, 1.0f64, &theta, x2);
            let raw = &x[packing.eta2_range(i)];
            let mut eta2 = mean2;
            for (j, &k) in packing.v2_free.iter().enumerate() {
                for row in 0..eta2.len() {
                    eta2[row] += factor2[(row, k)] * raw[j];
                }
            }
            let y2 = between_y_contribution(bp, 1.0f64, &theta, &eta2, x2);
            let (values, mask) = data.participant_block(i);
            let mut adj = Vec::with_capacity(values.len());
            for t in 0..data.t_len {
                for r in 0..data.u {
                    let pos = t * data.u + r;
                    if mask[pos] {
                        let mut v = values[pos] - y2[r];
                        if !y3.is_empty() {
                            v -= y3[t][r];
                        }
                        adj.push(v);
                    } else {
                        adj.push(0.0);
                    }
                }
            }
            let obs = Obs::new(data.t_len, data.u, adj, mask)?;
            let pm = compile_participant(
                spec,
                1.0f64,
                &theta,
                &eta2,
                &eta3,
                &data.x1_rows(i),
                data.t_len,
                &CompileOptions::default(),
            )?;
            let fo = filter_univariate(&pm, &obs, true)?;
            let sm = smooth(&fo, &pm.steps)?;
            for t in 0..data.t_len {
                for k in 0..v1 {
                    let pos = (i * data.t_len + t) * v1 + k;
                    let m = sm.means[t][k];
                    let var = sm.covs[t][(k, k)];
                    acc_mean[pos] += m;
                    acc_second[pos] += var + m * m;
                }
            }
        }
    }
    let nd = selected.len() as f64;
    let mut rows = Vec::with_capacity(acc_mean.len());
    for i in 0..data.n {
        for t in 0..data.t_len {
            for k in 0..v1 {
                let pos = (i * data.t_len + t) * v1 + k;
                let mean = acc_mean[pos] / nd;
                let var = (acc_second[pos] / nd - mean * mean).max(0.0);
                rows.push((data.ids[i], t + 1, k + 1, mean, var.sqrt()));
            }
        }
    }
    Ok(rows)
}

fn cmd_reproduce(args: ReproduceArgs, defaults: &ConfigDefaults) -> Result<()> {
    if args.replicates == 0 {
        return Err(Error::Validation("--replicates must be positive".into()));
    }
    if !(args.scale > 0.0 && args.scale <= 1.0) {
        return Err(Error::Validation("--scale must lie in (0, 1]".into()));
    }
    let samplers: Vec<SamplerKind> = args
        .samplers
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<_>>>()?;
    let indicator_blocks: Vec<Option<usize>> = match &args.indicators {
        None => vec![None],
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map(Some)
                    .map_err(|_| Error::Validation(format!("bad indicator count '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    std::fs::create_dir_all(&args.out)?;
    let mut all_rows: Vec<(String, usize, EfficiencyRow)> = Vec::new();

    for block in &indicator_blocks {
        let overrides = match block {
            Some(m) => format!("indicators={m}"),
            None => String::new(),
        };
        let spec = load_spec(&args.experiment, &overrides)?;
        let n =
            ((spec.presets.default_n.unwrap_or(20) as f64 * args.scale).round() as usize).max(2);
        let t =
            ((spec.presets.default_t.unwrap_or(50) as f64 * args.scale).round() as usize).max(4);
        let block_label = match block {
            Some(m) => format!("{}[m={}]", spec.name, m),
            None => spec.name.clone(),
        };
        println!("== {} at N={}, T={} ({} replicates)", block_label, n, t, args.replicates);

        for rep in 0..args.replicates {
            let sc = SimConfig {
                n,
                t_len: t,
                seed: args.seed + rep as u64,
                ..SimConfig::for_spec(&spec)
            };
            let sim = simulate(&spec, &sc)?;
            let rep_dir = args.out.join(format!("{block_label}-rep{rep}"));
            std::fs::create_dir_all(&rep_dir)?;
            sim.data.write_csv(&rep_dir.join("data.csv"))?;
            std::fs::write(
                rep_dir.join("truth.json"),
                serde_json::to_string_pretty(&sim.truth)?,
            )?;
            // Samplers run sequentially within a replicate so wall-time
            // comparisons stay fair.
            for &kind in &samplers {
                if kind == SamplerKind::NutsJoint && spec.dims.lag != 1 {
                    println!("   {kind}: skipped (lag > 1 not supported by the joint target)");
                    continue;
                }
                let cfg = SamplerConfig {
                    chains: args.chains,
                    iterations: args.iter,
                    warmup: args.warmup,
                    target_accept: defaults.target_accept.unwrap_or(0.95),
                    max_treedepth: defaults.max_treedepth.unwrap_or(12),
                    mass_matrix: MassMatrix::DiagonalAdapted,
                    seed: args.seed + 1000 * (rep as u64 + 1),
                    init: if spec.presets.init.is_empty() {
                        InitStrategy::RandomUniform
                    } else {
                        InitStrategy::Explicit(spec.presets.init.clone())
                    },
                };
                let outcome =
                    run_experiment(&spec, &sim.data, kind, &cfg, PosteriorOpts::default())?;
                let per_param: Vec<(String, Vec<Vec<f64>>)> = spec
                    .theta_names()
                    .iter()
                    .map(|name| Ok((name.clone(), outcome.param_chains(name)?)))
                    .collect::<Result<Vec<_>>>()?;
                let row =
                    efficiency_report(&format!("{kind}"), &per_param, outcome.elapsed_s / 60.0)?;
                println!(
                    "   rep {rep} {kind}: min bulk-ESS/min {:.1}, min tail-ESS/min {:.1}, max rhat {:.4}, wall {:.1}s",
                    row.bulk_ess_per_minute, row.tail_ess_per_minute, row.max_rhat, outcome.elapsed_s
                );
                all_rows.push((block_label.clone(), rep, row));
            }
        }
    }

    // Aggregate per (block, sampler).
    let mut w = csv::Writer::from_path(args.out.join("summary.csv"))
        .map_err(|e| Error::Io(e.to_string()))?;
    w.write_record([
        "block",
        "sampler",
        "replicates",
        "median_bulk_ess_per_min",
        "median_tail_ess_per_min",
        "median_max_rhat",
        "pct_rhat_lt_1.01",
        "pct_rhat_lt_1.05",
        "median_minutes_to_400",
        "median_minutes_to_1000",
        "median_minutes_to_10000",
    ])
    .map_err(|e| Error::Io(e.to_string()))?;
    let mut keys: Vec<(String, String)> =
        all_rows.iter().map(|(b, _, r)| (b.clone(), r.label.clone())).collect();
    keys.sort();
    keys.dedup();
    for (block, sampler) in keys {
        let rows: Vec<&EfficiencyRow> = all_rows
            .iter()
            .filter(|(b, _, r)| *b == block && r.label == sampler)
            .map(|(_, _, r)| r)
            .collect();
        let median = |f: &dyn Fn(&EfficiencyRow) -> f64| -> f64 {
            let mut v: Vec<f64> = rows.iter().map(|r| f(r)).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let pct = |thr: f64| -> f64 {
            100.0 * rows.iter().filter(|r| r.max_rhat < thr).count() as f64 / rows.len() as f64
        };
        w.write_record([
            block.clone(),
            sampler.clone(),
            rows.len().to_string(),
            format!("{:.2}", median(&|r| r.bulk_ess_per_minute)),
            format!("{:.2}", median(&|r| r.tail_ess_per_minute)),
            format!("{:.4}", median(&|r| r.max_rhat)),
            format!("{:.0}", pct(RHAT_STRICT)),
            format!("{:.0}", pct(RHAT_LOOSE)),
            format!("{:.1}", median(&|r| r.minutes_to_400)),
            format!("{:.1}", median(&|r| r.minutes_to_1000)),
            format!("{:.1}", median(&|r| r.minutes_to_10000)),
        ])
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    println!("summary -> {}", args.out.join("summary.csv").display());
    Ok(())
}

fn cmd_check_grad(args: CheckGradArgs) -> Result<()> {
    let spec = load_spec(&args.model, &args.preset_overrides)?;
    let data = match &args.data {
        Some(path) => Dataset::read_csv(path, spec.dims.u, spec.within.x1_dim())?,
        None => {
            let sc = SimConfig {
                n: args.n,
                t_len: args.t,
                seed: args.seed,
                ..SimConfig::for_spec(&spec)
            };
            simulate(&spec, &sc)?.data
        }
    };
    let target = MarginalTarget::new(&spec, &data, PosteriorOpts::default())?;
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(args.seed);
    let x: Vec<f64> = (0..target.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut grad = vec![0.0; x.len()];
    let logp = target.logp_grad(&x, &mut grad);
    if !logp.is_finite() {
        return Err(Error::Numeric("log posterior not finite at the test point".into()));
    }
    let fd = fd_gradient(&target, &x);
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for k in 0..x.len() {
        let rel = (grad[k] - fd[k]).abs() / (1.0 + fd[k].abs());
        if rel > worst {
            worst = rel;
            worst_name = target.names()[k].clone();
        }
    }
    println!(
        "log posterior {logp:.6}; max relative gradient discrepancy {worst:.3e} (at {worst_name})"
    );
    Ok(())
}

fn cmd_dump_ssm(args: DumpSsmArgs) -> Result<()> {
    let spec = load_spec(&args.model, &args.preset_overrides)?;
    if args.timepoint == 0 || args.participant == 0 {
        return Err(Error::Validation("--participant and --timepoint are 1-based".into()));
    }
    let mut theta = vec![0.0; spec.n_theta()];
    if args.at_truth {
        for (j, p) in spec.priors.iter().enumerate() {
            if let Some(v) = spec.presets.truth.get(&p.name) {
                theta[j] = *v;
            }
        }
    }
    // Between-level latents at their structural prior means.
    let bp = &spec.between_participant;
    let x2 = if bp.x_dim() == 0 {
        &[][..]
    } else {
        bp.covariate_row(args.participant - 1)
    };
    let (eta2, _) = dsem_kalman::model::between_prior_moments(bp, 1.0f64, &theta, x2);
    let t_len = (args.timepoint + 1).max(2);
    let eta3: Vec<Vec<f64>> = match &spec.between_timepoint {
        Some(bt) => {
            let x3 = if bt.x_dim() == 0 { &[][..] } else { bt.covariate_row(0) };
            let (mean3, _) = dsem_kalman::model::between_prior_moments(bt, 1.0f64, &theta, x3);
            vec![mean3; t_len]
        }
        None => Vec::new(),
    };
    let x1: Vec<Vec<f64>> = if spec.within.x1_dim() > 0 {
        vec![vec![0.0; spec.within.x1_dim()]; t_len]
    } else {
        Vec::new()
    };
    let pm = compile_participant(
        &spec,
        1.0f64,
        &theta,
        &eta2,
        &eta3,
        &x1,
        t_len,
        &CompileOptions::default(),
    )?;
    let step = pm.steps.at((args.timepoint - 1).min(t_len - 2));
    let m = pm.state_dim();
    let mat_rows = |mat: &dsem_kalman::linalg::Mat<f64>| -> Vec<Vec<f64>> {
        (0..mat.rows()).map(|i| (0..mat.cols()).map(|j| mat[(i, j)]).collect()).collect()
    };
    let dump = serde_json::json!({
        "model": spec.name,
        "participant": args.participant,
        "timepoint": args.timepoint,
        "state_dim": m,
        "z": mat_rows(&pm.z.dense()),
        "t": mat_rows(&step.t),
        "c": step.c,
        "w": mat_rows(&step.w),
        "a1": pm.init.a1,
        "p1": mat_rows(&pm.init.p1),
        "init_mode": format!("{:?}", pm.init.mode),
    });
    println!("{}", serde_json::to_string_pretty(&dump)?);
    Ok(())
}
