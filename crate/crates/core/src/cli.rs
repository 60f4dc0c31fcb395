//! Command-line front end: `simulate`, `fit`, `baseline`, `sweep`, `atet`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::causal::{atet_summary, fmt_f64, PanelData};
use crate::config::{check_input, check_output, RunConfig};
use crate::error::{Error, Result};
use crate::estimator::{fit_panel, FitResult, Objective};
use crate::msm::{fit_msm, predict_panel, stabilized_weights};
use crate::simulation::{
    normalized_mse, run_tensor, sensitivity_sweep, simulate_panel, summarize, PolicyKind, SimTruth, SweepGrid,
    SweepRow, SweepSpec, World,
};
use crate::tensor::DenseTensor3;

#[derive(Debug, Parser)]
#[command(name = "tmsm", version, about = "Tensorized marginal structural models")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true, env = "TMSM_THREADS")]
    pub threads: Option<usize>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel and write it with its ground truth.
    Simulate(SimulateArgs),
    /// Fit the tensor estimator to a panel.
    Fit(FitArgs),
    /// Fit the per-period linear MSM baseline.
    Baseline(BaselineArgs),
    /// Sensitivity of the tensor estimator to rank and history length.
    Sweep(SweepArgs),
    /// ATET from a saved fit.
    Atet(AtetArgs),
}

#[derive(Debug, Args, Default)]
pub struct WorldArgs {
    /// World preset: narrow (500×10), wide (10×500) or custom.
    #[arg(long, value_parser = parse_world)]
    pub world: Option<World>,
    /// Number of units (implies a custom world).
    #[arg(long = "n-units", short = 'n')]
    pub n_units: Option<usize>,
    /// Number of periods (implies a custom world).
    #[arg(long = "n-periods", short = 't')]
    pub n_periods: Option<usize>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<PolicyKind>,
    /// Rank of the ground-truth tensor.
    #[arg(long)]
    pub true_rank: Option<usize>,
    /// History length of the ground-truth tensor.
    #[arg(long)]
    pub true_k: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct McArgs {
    /// Monte Carlo sample paths per weight computation.
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Enumerate histories exactly instead of sampling (small problems only).
    #[arg(long)]
    pub exact: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output panel CSV.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Output ground-truth JSON.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input panel CSV.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Ground truth from `simulate`. When given, its known non-tensor outcome
    /// terms are removed before fitting and the fit is scored against it.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Treatment policy that generated the panel (defaults to the truth's).
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<PolicyKind>,
    #[arg(long, short = 'r')]
    pub rank: Option<usize>,
    #[arg(long, short = 'k')]
    pub k: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Bound on the magnitude of each CP weight.
    #[arg(long)]
    pub l_bound: Option<f64>,
    /// completion or approximation.
    #[arg(long, value_parser = parse_objective)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub backtracking: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub mc: McArgs,
    /// Output FitResult JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output metrics JSON (ATET, NMSE when truth is given).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Option<PolicyKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub mc: McArgs,
    /// Output MsmFit JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    /// Policies to sweep, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    pub policies: Option<Vec<PolicyKind>>,
    /// Assumed ranks, comma separated.
    #[arg(long = "ranks", value_delimiter = ',')]
    pub r_values: Option<Vec<usize>>,
    /// Assumed history lengths, comma separated.
    #[arg(long = "ks", value_delimiter = ',')]
    pub k_values: Option<Vec<usize>>,
    /// Base rank for the k axis of an axes grid.
    #[arg(long)]
    pub base_rank: Option<usize>,
    /// Base history length for the r axis of an axes grid.
    #[arg(long)]
    pub base_k: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// axes (vary one parameter at a time) or full.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<SweepGrid>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub mc: McArgs,
    /// Raw per-replicate CSV, written as replicates finish.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Aggregated CSV with mean and standard error.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AtetArgs {
    /// FitResult JSON from `fit`.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub panel: Option<PathBuf>,
}

fn parse_world(s: &str) -> std::result::Result<World, String> {
    match s {
        "narrow" => Ok(World::Narrow),
        "wide" => Ok(World::Wide),
        "custom" => Ok(World::Custom),
        _ => Err(format!("expected narrow, wide or custom, got `{s}`")),
    }
}

fn parse_policy(s: &str) -> std::result::Result<PolicyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    match s {
        "completion" => Ok(Objective::Completion),
        "approximation" => Ok(Objective::Approximation),
        _ => Err(format!("expected completion or approximation, got `{s}`")),
    }
}

fn parse_grid(s: &str) -> std::result::Result<SweepGrid, String> {
    match s {
        "axes" => Ok(SweepGrid::Axes),
        "full" => Ok(SweepGrid::Full),
        _ => Err(format!("expected axes or full, got `{s}`")),
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, in which case keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(cfg, a),
        Command::Fit(a) => cmd_fit(cfg, a),
        Command::Baseline(a) => cmd_baseline(cfg, a),
        Command::Sweep(a) => cmd_sweep(cfg, a),
        Command::Atet(a) => cmd_atet(cfg, a),
    }
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| Error::Config(format!("missing required path --{name}")))
}

fn apply_world(cfg: &mut RunConfig, w: &WorldArgs) {
    let sim = &mut cfg.simulation;
    if let Some(world) = w.world {
        sim.world = world;
    }
    if w.n_units.is_some() || w.n_periods.is_some() {
        let (n, t) = sim.dims();
        sim.world = World::Custom;
        sim.n_units = w.n_units.unwrap_or(n);
        sim.n_periods = w.n_periods.unwrap_or(t);
    }
    if let Some(p) = w.policy {
        sim.policy = p;
    }
    if let Some(r) = w.true_rank {
        sim.true_rank = r;
    }
    if let Some(k) = w.true_k {
        sim.true_k = k;
    }
    if let Some(s) = w.noise_std {
        sim.noise_std = s;
    }
}

fn apply_mc(cfg: &mut RunConfig, m: &McArgs) {
    if let Some(n) = m.n_samples {
        cfg.mc.n_samples = n;
    }
    if m.exact {
        cfg.mc.exact = true;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn load_truth(path: &Path, panel: &PanelData) -> Result<SimTruth> {
    let truth: SimTruth = read_json(path)?;
    if &truth.panel != panel {
        return Err(Error::Config(format!("truth {} does not describe the given panel", path.display())));
    }
    Ok(truth)
}

fn check_panel_for_policy(panel: &PanelData) -> Result<()> {
    if panel.covariate_dim() != 4 {
        return Err(Error::Config(format!(
            "the simulation policies use 4 covariates, panel has {}",
            panel.covariate_dim()
        )));
    }
    Ok(())
}

fn cmd_simulate(mut cfg: RunConfig, a: SimulateArgs) -> Result<()> {
    apply_world(&mut cfg, &a.world);
    if let Some(s) = a.seed {
        cfg.simulation.seed = s;
    }
    let panel_path = required(a.panel, &cfg.paths.panel, "panel")?;
    let truth_path = a.truth.or(cfg.paths.truth.clone());
    check_output(&panel_path, "panel")?;
    if let Some(p) = &truth_path {
        check_output(p, "truth")?;
    }
    cfg.simulation.validate()?;

    let truth = simulate_panel(&cfg.simulation)?;
    truth.panel.write_csv_path(&panel_path)?;
    if let Some(p) = &truth_path {
        write_json(p, &truth)?;
    }
    let panel = &truth.panel;
    let rate = panel.treatments().iter().map(|&a| a as f64).sum::<f64>() / panel.n_cells() as f64;
    println!(
        "simulated {} world, {} policy: N={} T={} treatment rate {:.4}",
        match cfg.simulation.world {
            World::Narrow => "narrow",
            World::Wide => "wide",
            World::Custom => "custom",
        },
        cfg.simulation.policy.name(),
        panel.n_units(),
        panel.n_periods(),
        rate
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct FitMetrics {
    atet: Option<f64>,
    treated_cells: usize,
    /// `tensor_component` when the fit targeted outcomes with the known
    /// non-tensor terms removed.
    outcome_scope: &'static str,
    nmse: Option<f64>,
    iterations: usize,
    converged: bool,
    final_loss: f64,
}

fn cmd_fit(mut cfg: RunConfig, a: FitArgs) -> Result<()> {
    let est = &mut cfg.estimator;
    if let Some(v) = a.rank {
        est.rank = v;
    }
    if let Some(v) = a.k {
        est.k = v;
    }
    if let Some(v) = a.step {
        est.step = v;
    }
    if let Some(v) = a.max_iters {
        est.max_iters = v;
    }
    if let Some(v) = a.tol {
        est.tol = v;
    }
    if a.l_bound.is_some() {
        est.l_bound = a.l_bound;
    }
    if let Some(v) = a.objective {
        est.objective = v;
    }
    if a.backtracking {
        est.backtracking = true;
    }
    if let Some(s) = a.seed {
        est.seed = s;
        cfg.mc.seed = s;
    }
    apply_mc(&mut cfg, &a.mc);

    let panel_path = required(a.panel, &cfg.paths.panel, "panel")?;
    let truth_path = a.truth.or(cfg.paths.truth.clone());
    let out = required(a.out, &cfg.paths.out, "out")?;
    let metrics_path = a.metrics.or(cfg.paths.metrics.clone());
    check_input(&panel_path, "panel")?;
    if let Some(p) = &truth_path {
        check_input(p, "truth")?;
    }
    check_output(&out, "out")?;
    if let Some(p) = &metrics_path {
        check_output(p, "metrics")?;
    }
    cfg.estimator.validate()?;
    cfg.mc.validate()?;

    let panel = PanelData::read_csv_path(&panel_path)?;
    if cfg.estimator.k > panel.n_periods() {
        return Err(Error::InvalidArgument(format!(
            "history length k={} exceeds the panel's T={}",
            cfg.estimator.k,
            panel.n_periods()
        )));
    }
    check_panel_for_policy(&panel)?;
    let truth = truth_path.as_deref().map(|p| load_truth(p, &panel)).transpose()?;
    let policy_kind = a
        .policy
        .or(truth.as_ref().map(|t| t.config.policy))
        .unwrap_or(cfg.simulation.policy);
    let policy = crate::simulation::Policy {
        kind: policy_kind,
        gamma: truth.as_ref().map_or(cfg.simulation.gamma, |t| t.config.gamma),
    };

    let (fit, nmse, scope) = match &truth {
        Some(t) => {
            let truth = SimTruth {
                config: crate::simulation::SimConfig {
                    policy: policy_kind,
                    ..t.config
                },
                ..t.clone()
            };
            let (fit, nmse) = run_tensor(&truth, &cfg.estimator, &cfg.mc)?;
            (fit, Some(nmse), "tensor_component")
        }
        None => (fit_panel(&panel, &policy, &policy, &cfg.estimator, &cfg.mc)?, None, "outcome"),
    };
    let summary = atet_summary(&fit.estimate, &panel, fit.k);
    let (atet, treated) = match summary {
        Ok(s) => (Some(s.atet), s.treated_cells),
        Err(Error::NoTreatedCells) => (None, 0),
        Err(e) => return Err(e),
    };
    write_json(&out, &fit)?;
    let metrics = FitMetrics {
        atet,
        treated_cells: treated,
        outcome_scope: scope,
        nmse,
        iterations: fit.iterations,
        converged: fit.converged,
        final_loss: fit.final_loss,
    };
    if let Some(p) = &metrics_path {
        write_json(p, &metrics)?;
    }
    println!(
        "fit rank {} k {}: {} iterations, converged {}, loss {:.4}",
        fit.rank, fit.k, fit.iterations, fit.converged, fit.final_loss
    );
    match atet {
        Some(v) => println!("ATET {v:.4} over {treated} treated cells"),
        None => println!("ATET undefined: no treated cells"),
    }
    if let Some(v) = nmse {
        println!("nmse {v:.4}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BaselineMetrics {
    nmse: Option<f64>,
    rank_deficient_periods: usize,
}

fn cmd_baseline(mut cfg: RunConfig, a: BaselineArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.mc.seed = s;
    }
    apply_mc(&mut cfg, &a.mc);
    let panel_path = required(a.panel, &cfg.paths.panel, "panel")?;
    let truth_path = a.truth.or(cfg.paths.truth.clone());
    let out = required(a.out, &cfg.paths.out, "out")?;
    let metrics_path = a.metrics.or(cfg.paths.metrics.clone());
    check_input(&panel_path, "panel")?;
    if let Some(p) = &truth_path {
        check_input(p, "truth")?;
    }
    check_output(&out, "out")?;
    if let Some(p) = &metrics_path {
        check_output(p, "metrics")?;
    }
    cfg.mc.validate()?;

    let panel = PanelData::read_csv_path(&panel_path)?;
    check_panel_for_policy(&panel)?;
    let truth = truth_path.as_deref().map(|p| load_truth(p, &panel)).transpose()?;
    let policy = crate::simulation::Policy {
        kind: a
            .policy
            .or(truth.as_ref().map(|t| t.config.policy))
            .unwrap_or(cfg.simulation.policy),
        gamma: truth.as_ref().map_or(cfg.simulation.gamma, |t| t.config.gamma),
    };
    let sw = stabilized_weights(&policy, &panel, &policy, &cfg.mc)?;
    let fit = fit_msm(&panel, &sw.weights)?;
    let nmse = match &truth {
        Some(t) => Some(normalized_mse(&predict_panel(&fit, &panel)?, t)?),
        None => None,
    };
    write_json(&out, &fit)?;
    if let Some(p) = &metrics_path {
        write_json(
            p,
            &BaselineMetrics {
                nmse,
                rank_deficient_periods: fit.rank_deficient.iter().filter(|&&d| d).count(),
            },
        )?;
    }
    if fit.warning {
        let n = fit.rank_deficient.iter().filter(|&&d| d).count();
        eprintln!("warning: {n} periods had a rank-deficient weighted design; ridge solution used");
    }
    println!("MSM fitted over {} periods", panel.n_periods());
    if let Some(v) = nmse {
        println!("nmse {v:.4}");
    }
    Ok(())
}

fn sweep_record(row: &SweepRow) -> [String; 6] {
    [
        row.policy.name().to_string(),
        row.r.to_string(),
        row.k.to_string(),
        row.rep.to_string(),
        row.nmse.map(fmt_f64).unwrap_or_default(),
        row.error.clone().unwrap_or_default(),
    ]
}

fn cmd_sweep(mut cfg: RunConfig, a: SweepArgs) -> Result<()> {
    apply_world(&mut cfg, &a.world);
    apply_mc(&mut cfg, &a.mc);
    let sw = &mut cfg.sweep;
    if let Some(v) = a.policies {
        sw.policies = v;
    }
    if let Some(v) = a.r_values {
        sw.r_values = v;
    }
    if let Some(v) = a.k_values {
        sw.k_values = v;
    }
    if let Some(v) = a.reps {
        sw.n_reps = v;
    }
    if let Some(v) = a.grid {
        sw.grid = v;
    }
    if let Some(v) = a.base_rank {
        cfg.estimator.rank = v;
    }
    if let Some(v) = a.base_k {
        cfg.estimator.k = v;
    }
    if let Some(v) = a.max_iters {
        cfg.estimator.max_iters = v;
    }
    if let Some(s) = a.seed {
        cfg.simulation.seed = s;
        cfg.mc.seed = s;
        cfg.estimator.seed = s;
    }
    let out = required(a.out, &cfg.paths.out, "out")?;
    let summary_path = a.summary.or(cfg.paths.summary.clone());
    check_output(&out, "out")?;
    if let Some(p) = &summary_path {
        check_output(p, "summary")?;
    }
    let spec = SweepSpec {
        base: cfg.simulation,
        policies: cfg.sweep.policies.clone(),
        r_values: cfg.sweep.r_values.clone(),
        k_values: cfg.sweep.k_values.clone(),
        n_reps: cfg.sweep.n_reps,
        grid: cfg.sweep.grid,
        estimator: cfg.estimator,
        mc: cfg.mc,
    };
    spec.validate()?;

    let mut raw = csv::Writer::from_path(&out)?;
    raw.write_record(["policy", "r", "k", "rep", "nmse", "error"])?;
    raw.flush()?;
    let mut failures = 0usize;
    let rows = sensitivity_sweep(&spec, |batch| {
        for row in batch {
            if row.error.is_some() {
                failures += 1;
            }
            raw.write_record(sweep_record(row))?;
        }
        raw.flush()?;
        Ok(())
    })?;
    drop(raw);

    let summary = summarize(&rows);
    if let Some(p) = &summary_path {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["policy", "r", "k", "n_ok", "mean", "se"])?;
        for s in &summary {
            w.write_record([
                s.policy.name().to_string(),
                s.r.to_string(),
                s.k.to_string(),
                s.n_ok.to_string(),
                fmt_f64(s.mean),
                fmt_f64(s.se),
            ])?;
        }
        w.flush()?;
    }
    for s in &summary {
        println!(
            "{:<8} r={:<3} k={:<2} nmse {:.4} ± {:.4} ({} ok)",
            s.policy.name(),
            s.r,
            s.k,
            s.mean,
            s.se,
            s.n_ok
        );
    }
    if failures > 0 {
        eprintln!("warning: {failures} sweep fits failed; see the error column");
    }
    Ok(())
}

fn cmd_atet(cfg: RunConfig, a: AtetArgs) -> Result<()> {
    let fit_path = required(a.fit, &cfg.paths.fit, "fit")?;
    let panel_path = required(a.panel, &cfg.paths.panel, "panel")?;
    check_input(&fit_path, "fit")?;
    check_input(&panel_path, "panel")?;
    let fit: FitResult = read_json(&fit_path)?;
    // Re-validate the deserialized tensor's shape.
    let estimate = DenseTensor3::from_vec(fit.estimate.dims(), fit.estimate.values().to_vec())?;
    let panel = PanelData::read_csv_path(&panel_path)?;
    let s = atet_summary(&estimate, &panel, fit.k)?;
    println!("ATET {} over {} treated cells", fmt_f64(s.atet), s.treated_cells);
    Ok(())
}
