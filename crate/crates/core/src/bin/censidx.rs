use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use censidx::fitter::{fit_detailed, standard_errors, BandwidthMode, TruncationCriterion};
use censidx::io::{
    fit_records, fit_summary, read_dataset, read_records, simulation_records, simulation_summary,
    tau_table, write_records, InputEcho, RunConfig, SEED_ENV,
};
use censidx::objective::SelfTerm;
use censidx::sim::{monte_carlo_report, FitMode};
use censidx::{Error, Result};

#[derive(Parser)]
#[command(
    name = "censidx",
    version,
    about = "Single-index density estimation for censored responses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a dataset.
    Fit(DataArgs),
    /// Run the Monte Carlo study.
    Simulate(SimArgs),
    /// Per-truncation criterion curve and weight table.
    Diagnose(DataArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving the report and summary.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// Delimited dataset with columns z, delta, x1..xd.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    /// Target censoring proportion.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Censoring rate; skips calibration.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<FitMode>,
    #[arg(long, value_delimiter = ',')]
    theta0: Option<Vec<f64>>,
    #[arg(long)]
    mixture_weight: Option<f64>,
    #[arg(long)]
    mixture_mean: Option<f64>,
    #[arg(long)]
    mixture_variance: Option<f64>,
    /// Set the regression error to zero.
    #[arg(long)]
    no_noise: bool,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct FitArgs {
    /// Covariate box as lo:hi pairs, one per coordinate.
    #[arg(long, value_delimiter = ',', value_parser = parse_interval)]
    trim_box: Option<Vec<(f64, f64)>>,
    /// Quantiles defining the default covariate box, as lo:hi.
    #[arg(long, value_parser = parse_interval)]
    trim_box_quantiles: Option<(f64, f64)>,
    #[arg(long)]
    trim_level: Option<f64>,
    #[arg(long)]
    h0: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    h_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    tau_grid: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    tau0: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    tau1: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    param_bound: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    x_tolerance: Option<f64>,
    #[arg(long)]
    f_tolerance: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    initial_step: Option<f64>,
    #[arg(long, value_parser = parse_self_term)]
    self_term: Option<SelfTerm>,
    #[arg(long, value_parser = parse_bandwidth_mode)]
    bandwidth_mode: Option<BandwidthMode>,
    #[arg(long)]
    max_alternations: Option<usize>,
    #[arg(long)]
    alternation_tolerance: Option<f64>,
    #[arg(long)]
    quad_points: Option<usize>,
    #[arg(long)]
    min_window_events: Option<usize>,
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<TruncationCriterion>,
    /// Spread of the jittered starts around the pilot direction.
    #[arg(long)]
    prelim_jitter: Option<f64>,
    /// Also start the preliminary search from the origin.
    #[arg(long)]
    prelim_origin_start: bool,
    /// Fit truncation candidates one after another.
    #[arg(long)]
    serial: bool,
}

fn parse_interval(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("`{s}` is not lo:hi"))?;
    let lo = a
        .trim()
        .parse()
        .map_err(|_| format!("`{a}` is not a number"))?;
    let hi = b
        .trim()
        .parse()
        .map_err(|_| format!("`{b}` is not a number"))?;
    Ok((lo, hi))
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<FitMode, String> {
    parse_enum(s)
}

fn parse_self_term(s: &str) -> std::result::Result<SelfTerm, String> {
    parse_enum(s)
}

fn parse_bandwidth_mode(s: &str) -> std::result::Result<BandwidthMode, String> {
    parse_enum(s)
}

fn parse_criterion(s: &str) -> std::result::Result<TruncationCriterion, String> {
    parse_enum(s)
}

macro_rules! set {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value {
            $target = v;
        }
    };
}

impl FitArgs {
    fn apply(self, cfg: &mut censidx::FitConfig) {
        if self.trim_box.is_some() {
            cfg.trim_box = self.trim_box;
        }
        set!(cfg.trim_box_quantiles, self.trim_box_quantiles);
        if self.trim_level.is_some() {
            cfg.trim_level = self.trim_level;
        }
        if self.h0.is_some() {
            cfg.h0 = self.h0;
        }
        if self.h_grid.is_some() {
            cfg.h_grid = self.h_grid;
        }
        if self.tau_grid.is_some() {
            cfg.tau_grid = self.tau_grid;
        }
        if self.tau0.is_some() {
            cfg.tau0 = self.tau0;
        }
        if self.tau1.is_some() {
            cfg.tau1 = self.tau1;
        }
        set!(cfg.radius, self.radius);
        set!(cfg.param_bound, self.param_bound);
        set!(cfg.optimizer.max_iters, self.max_iters);
        set!(cfg.optimizer.x_tolerance, self.x_tolerance);
        set!(cfg.optimizer.f_tolerance, self.f_tolerance);
        set!(cfg.optimizer.restarts, self.restarts);
        set!(cfg.optimizer.initial_step, self.initial_step);
        set!(cfg.self_term, self.self_term);
        set!(cfg.bandwidth_mode, self.bandwidth_mode);
        set!(cfg.max_alternations, self.max_alternations);
        set!(cfg.alternation_tolerance, self.alternation_tolerance);
        set!(cfg.quad_points, self.quad_points);
        set!(cfg.min_window_events, self.min_window_events);
        set!(cfg.criterion, self.criterion);
        set!(cfg.prelim_jitter, self.prelim_jitter);
        if self.prelim_origin_start {
            cfg.prelim_origin_start = true;
        }
        if self.serial {
            cfg.parallel = false;
        }
    }
}

/// Config file, then the seed environment variable, then flags.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn output_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = common
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("censidx-out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn persist(
    dir: &Path,
    stem: &str,
    records: &[censidx::io::ReportRecord],
    summary: &str,
) -> Result<()> {
    let report = dir.join(format!("{stem}.jsonl"));
    write_records(&report, records)?;
    if read_records(&report)? != records {
        return Err(Error::Internal(format!(
            "{} does not re-read identically",
            report.display()
        )));
    }
    fs::write(dir.join(format!("{stem}_summary.txt")), summary)?;
    Ok(())
}

fn write_timing(dir: &Path, stem: &str, seconds: f64) -> Result<()> {
    fs::write(
        dir.join(format!("{stem}_timing.txt")),
        format!("seconds: {seconds:.3}\n"),
    )?;
    Ok(())
}

fn cmd_fit(args: DataArgs, diagnose: bool) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(&args.common)?;
    args.fit.apply(&mut cfg.fit);
    let data = read_dataset(&args.data)?;
    let detail = fit_detailed(&data.sample, &cfg.fit)?;
    let fit = &detail.fit;
    let se = standard_errors(fit, data.sample.n());
    let dir = output_dir(&args.common, &cfg)?;
    let stem = if diagnose { "diagnose" } else { "fit" };
    let records = fit_records(&cfg, InputEcho::new(&args.data, &data), fit, &se, stem);
    let summary = if diagnose {
        let mut s = tau_table(&fit.e2_table);
        s.push_str(&format!(
            "\n{:>10} {:>12} {:>12} {:>14}\n{:>10} {:>12.6} {:>12.6} {:>14.6}\n",
            "N",
            "weight_inf",
            "weight_tau",
            "weight_tau_raw",
            fit.n_retained,
            fit.weight_inf,
            fit.weight_tau,
            fit.weight_tau_raw
        ));
        s
    } else {
        fit_summary(fit, &se)
    };
    persist(&dir, stem, &records, &summary)?;
    write_timing(&dir, stem, start.elapsed().as_secs_f64())?;
    print!("{summary}");
    Ok(())
}

fn cmd_simulate(args: SimArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = load_config(&args.common)?;
    let d = &mut cfg.simulation;
    set!(d.n, args.n);
    set!(d.target_p, args.p);
    set!(d.reps, args.reps);
    if args.lambda.is_some() {
        d.lambda = args.lambda;
    }
    set!(d.mode, args.mode);
    set!(d.theta0, args.theta0);
    set!(d.covariates.standard_weight, args.mixture_weight);
    set!(d.covariates.mean, args.mixture_mean);
    set!(d.covariates.variance, args.mixture_variance);
    if args.no_noise {
        d.noise = false;
    }
    args.fit.apply(&mut d.fit);
    let report = monte_carlo_report(&cfg.simulation, cfg.simulation.mode)?;
    let dir = output_dir(&args.common, &cfg)?;
    let summary = simulation_summary(&report);
    persist(
        &dir,
        "simulate",
        &simulation_records(&cfg, &report),
        &summary,
    )?;
    write_timing(&dir, "simulate", start.elapsed().as_secs_f64())?;
    print!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a, false),
        Command::Diagnose(a) => cmd_fit(a, true),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("censidx: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
