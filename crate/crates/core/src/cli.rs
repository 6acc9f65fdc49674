//! Command-line front end.
//!
//! Every subcommand prints a human summary to stderr. With `--out` it
//! writes its CSV files and a `manifest.json` into that directory; without
//! it the CSV goes to stdout, so the output can be piped as is.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::activation::{activations_per_step, ActivationProfile};
use crate::config::{ConfigError, ConfigFile, ParallelismConfig};
use crate::harness::{
    build_workload, run_keep_baseline, run_step, ClockMode, HarnessError, RunOptions, Schedule,
    StepMetrics,
};
use crate::manifest::RunManifest;
use crate::perf::{
    projection_scenarios, scaling_exponent_fit, synthetic_sweep, PerfError, ScalingQuantity,
    Scenario, ScenarioInputs,
};
use crate::rok::{rok_curve, RokError, RokOptions, Strategy, DEFAULT_PREFETCH_DEPTH};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VALIDATE: i32 = 3;

pub const PROJECT_COLUMNS: [&str; 11] = [
    "model",
    "gpus",
    "tp",
    "pp",
    "dp",
    "zero_stage",
    "step_time_s",
    "act_bytes_per_gpu",
    "write_bw_gbs",
    "lifespan_years",
    "max_act_bytes",
];
pub const ROK_COLUMNS: [&str; 5] = [
    "strategy",
    "batch",
    "peak_gib",
    "throughput_tflops",
    "step_time_s",
];
pub const TRACE_COLUMNS: [&str; 4] = ["time_s", "event", "subject", "bytes"];
pub const METRICS_COLUMNS: [&str; 9] = [
    "run",
    "step_time_s",
    "peak_bytes",
    "offloaded_bytes",
    "forwarded_count",
    "backend_reads",
    "backend_writes",
    "step_time_ratio",
    "peak_reduction",
];
pub const VALIDATE_COLUMNS: [&str; 4] = ["model", "estimate_gib", "reference_gib", "deviation_pct"];
pub const SCALING_COLUMNS: [&str; 2] = ["quantity", "exponent"];

/// Reference per-GPU estimates for BERT at batch 16, TP 2, read as GiB.
pub const VALIDATION_ROWS: [(u64, u64, f64); 3] =
    [(8192, 4, 11.13), (12288, 3, 12.60), (16384, 2, 11.50)];
pub const VALIDATION_TOLERANCE: f64 = 0.10;

const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Parser)]
#[command(
    name = "actoffload",
    version,
    about = "Activation offloading models and simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for CSV outputs and the run manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Desk-scale factor dividing simulated sizes and times.
    #[arg(long, global = true, default_value_t = 1000.0)]
    shrink: f64,
    #[arg(long, global = true, value_enum, default_value_t = Clock::Virtual)]
    clock: Clock,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Clock {
    Virtual,
    Real,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Step time, write bandwidth and drive lifespan per GPU.
    Project,
    /// Run one synthetic training step with and without offloading.
    Simulate {
        #[arg(long, default_value_t = 1)]
        microbatches: u32,
        #[arg(long, value_enum, default_value_t = ScheduleArg::Sequential)]
        schedule: ScheduleArg,
    },
    /// Peak activation memory against throughput for each strategy.
    Rok {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 4, 8, 16, 32])]
        batches: Vec<u64>,
        /// Modules reloaded ahead of backward when offloading everything.
        #[arg(long, default_value_t = DEFAULT_PREFETCH_DEPTH)]
        prefetch_depth: usize,
        /// Offload only the planner's budget instead of everything.
        #[arg(long)]
        planner_budget: bool,
    },
    /// Compare activation estimates with the reference table.
    Validate,
    /// Fit activation and weight growth exponents against compute.
    Scaling,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Sequential,
    #[value(name = "1f1b")]
    OneFOneB,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Rok(#[from] RokError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} of {1} rows deviate by more than 10%")]
    ValidationFailed(usize, usize),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_CONFIG,
            CliError::ValidationFailed(..) => EXIT_VALIDATE,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Built-in configuration: 3-layer BERT at hidden 12288, batch 16, TP 2.
pub fn default_config() -> ConfigFile {
    ConfigFile {
        parallelism: ParallelismConfig::tensor_parallel(2),
        ..ConfigFile::default()
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Output {
    dir: Option<PathBuf>,
    manifest: RunManifest,
    started: Instant,
}

impl Output {
    fn new(cli: &Cli, subcommand: &str, config: &ConfigFile) -> Result<Self, CliError> {
        if let Some(d) = &cli.common.out {
            std::fs::create_dir_all(d)?;
        }
        let mut manifest = RunManifest::new(subcommand, config.clone());
        manifest.flag("seed", cli.common.seed);
        manifest.flag("shrink", cli.common.shrink);
        manifest.flag("clock", format!("{:?}", cli.common.clock).to_lowercase());
        if let Some(c) = &cli.common.config {
            manifest.flag("config", c.display());
        }
        Ok(Self {
            dir: cli.common.out.clone(),
            manifest,
            started: Instant::now(),
        })
    }

    /// Write `rows` under `columns` to `name` in the output directory, or to
    /// stdout when there is none.
    fn csv(&mut self, name: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(columns).map_err(std::io::Error::other)?;
            for r in rows {
                w.write_record(r).map_err(std::io::Error::other)?;
            }
            w.flush()?;
        }
        self.raw(name, columns, &buf)
    }

    fn raw(&mut self, name: &str, columns: &[&str], bytes: &[u8]) -> Result<(), CliError> {
        match &self.dir {
            Some(d) => {
                std::fs::write(d.join(name), bytes)?;
                self.manifest.output(name, columns);
            }
            None => std::io::stdout().write_all(bytes)?,
        }
        Ok(())
    }

    fn finish(mut self) -> Result<(), CliError> {
        if let Some(d) = &self.dir {
            self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
            let path = self.manifest.save(d)?;
            eprintln!("wrote {}", path.display());
        }
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, CliError> {
    match path {
        Some(p) => Ok(ConfigFile::load(p)?),
        None => Ok(default_config()),
    }
}

fn inputs_of(cfg: &ConfigFile) -> ScenarioInputs {
    ScenarioInputs {
        model: cfg.model.clone(),
        parallelism: cfg.parallelism.clone(),
        profile: cfg.activation_profile.clone(),
        hardware: cfg.hardware.clone(),
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if !(cli.common.shrink >= 1.0 && cli.common.shrink.is_finite()) {
        return Err(CliError::Usage(format!(
            "--shrink must be a finite factor >= 1, got {}",
            cli.common.shrink
        )));
    }
    let cfg = load_config(cli.common.config.as_deref())?;
    match &cli.command {
        Command::Project => project(cli, &cfg),
        Command::Simulate {
            microbatches,
            schedule,
        } => simulate(cli, &cfg, *microbatches, *schedule),
        Command::Rok {
            batches,
            prefetch_depth,
            planner_budget,
        } => {
            let offload = if *planner_budget {
                Strategy::Offload(None)
            } else {
                Strategy::offload_all(*prefetch_depth)
            };
            rok(cli, &cfg, batches, offload)
        }
        Command::Validate => validate(cli, &cfg),
        Command::Scaling => scaling(cli, &cfg),
    }
}

fn project(cli: &Cli, cfg: &ConfigFile) -> Result<(), CliError> {
    let scenarios = match cli.common.config {
        Some(_) => vec![Scenario {
            name: format!(
                "{}-h{}-l{}",
                cfg.model.family, cfg.model.hidden_dim, cfg.model.num_layers
            ),
            inputs: inputs_of(cfg),
        }],
        None => projection_scenarios(&cfg.hardware),
    };
    let mut rows = Vec::new();
    eprintln!(
        "{:<16} {:>6} {:>10} {:>12} {:>10} {:>10}",
        "model", "gpus", "step (s)", "act/GPU GB", "bw GB/s", "life (y)"
    );
    for s in &scenarios {
        let p = s.inputs.project()?;
        let par = &s.inputs.parallelism;
        let life = p
            .projected_lifespan
            .years()
            .map_or("inf".to_string(), |y| format!("{y:.4}"));
        eprintln!(
            "{:<16} {:>6} {:>10.3} {:>12.2} {:>10.2} {:>10}",
            s.name,
            par.gpus(),
            p.step_time,
            p.activations_per_gpu / 1e9,
            p.required_write_bw_per_gpu / 1e9,
            life
        );
        rows.push(vec![
            s.name.clone(),
            par.gpus().to_string(),
            par.tp_degree.to_string(),
            par.pp_degree.to_string(),
            par.dp_degree.to_string(),
            par.zero_stage.to_string(),
            format!("{:.6}", p.step_time),
            format!("{:.0}", p.activations_per_gpu),
            format!("{:.4}", p.required_write_bw_per_gpu / 1e9),
            life,
            format!("{:.0}", p.max_activations_per_gpu),
        ]);
    }
    let mut out = Output::new(cli, "project", cfg)?;
    out.csv("project.csv", &PROJECT_COLUMNS, &rows)?;
    out.finish()
}

fn metrics_row(run: &str, m: &StepMetrics, ratio: f64, reduction: f64) -> Vec<String> {
    vec![
        run.to_string(),
        format!("{:.9}", m.step_time),
        m.peak_activation_bytes.to_string(),
        m.offloaded_bytes.to_string(),
        m.forwarded_count.to_string(),
        m.backend_reads.to_string(),
        m.backend_writes.to_string(),
        format!("{ratio:.6}"),
        format!("{reduction:.6}"),
    ]
}

fn simulate(
    cli: &Cli,
    cfg: &ConfigFile,
    microbatches: u32,
    schedule: ScheduleArg,
) -> Result<(), CliError> {
    if microbatches == 0 {
        return Err(CliError::Usage("--microbatches must be at least 1".into()));
    }
    let inputs = inputs_of(cfg);
    let workload = build_workload(&inputs, cli.common.shrink);
    let throttle = cfg.storage.throttle(&cfg.hardware);
    let mut plan = workload
        .planned(microbatches, throttle.write_bw)
        .apply(&cfg.plan);
    if let Some(b) = cfg.plan.budget_bytes {
        // the config budget is at full scale
        plan.budget_bytes = (b as f64 / cli.common.shrink) as u64;
    }
    if cfg.plan.min_tensor_elems.is_none() {
        plan.min_tensor_elems = workload.min_tensor_elems();
    }
    let opts = RunOptions {
        clock: match cli.common.clock {
            Clock::Virtual => ClockMode::Virtual,
            Clock::Real => ClockMode::Real,
        },
        throttle,
        microbatches,
        schedule: match schedule {
            ScheduleArg::Sequential => Schedule::Sequential,
            ScheduleArg::OneFOneB => Schedule::OneForwardOneBackward,
        },
        seed: cli.common.seed,
        storage_root: None,
        weight_update_time: inputs.weight_update_time() / cli.common.shrink,
    };
    let run = run_step(&workload, &plan, &opts)?;
    let keep = match opts.clock {
        ClockMode::Virtual => run_keep_baseline(&workload, &opts).map_err(HarnessError::from)?,
        ClockMode::Real => run_step(&workload, &workload.keep_plan(), &opts)?,
    };
    let ratio = run.metrics.step_time / keep.metrics.step_time;
    let reduction = if keep.metrics.peak_activation_bytes > 0 {
        1.0 - run.metrics.peak_activation_bytes as f64 / keep.metrics.peak_activation_bytes as f64
    } else {
        0.0
    };
    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "{} modules, {} micro-batch(es), shrink {}, budget {} B",
        workload.modules.len(),
        microbatches,
        cli.common.shrink,
        plan.budget_bytes
    );
    let _ = writeln!(summary, "step time ratio  {ratio:.4}");
    let _ = writeln!(summary, "peak reduction   {reduction:.4}");
    let _ = writeln!(
        summary,
        "offloaded {} B, forwarded {}, reads {}, writes {}",
        run.metrics.offloaded_bytes,
        run.metrics.forwarded_count,
        run.metrics.backend_reads,
        run.metrics.backend_writes
    );
    eprint!("{summary}");

    let mut out = Output::new(cli, "simulate", cfg)?;
    out.manifest.flag("microbatches", microbatches);
    out.manifest
        .flag("schedule", format!("{:?}", opts.schedule));
    out.manifest.flag("plan_budget_bytes", plan.budget_bytes);
    out.csv(
        "metrics.csv",
        &METRICS_COLUMNS,
        &[
            metrics_row("offload", &run.metrics, ratio, reduction),
            metrics_row("keep", &keep.metrics, 1.0, 0.0),
        ],
    )?;
    if out.dir.is_some() {
        let mut buf = Vec::new();
        run.trace
            .write_csv(&mut buf)
            .map_err(std::io::Error::other)?;
        out.raw("trace.csv", &TRACE_COLUMNS, &buf)?;
    }
    out.finish()
}

fn rok(
    cli: &Cli,
    cfg: &ConfigFile,
    batches: &[u64],
    offload: Strategy,
) -> Result<(), CliError> {
    if batches.is_empty() || batches.contains(&0) {
        return Err(CliError::Usage("--batches needs positive sizes".into()));
    }
    let inputs = inputs_of(cfg);
    let opts = RokOptions {
        shrink: cli.common.shrink,
        throttle: cfg.storage.throttle(&cfg.hardware),
        seed: cli.common.seed,
    };
    let strategies = [Strategy::RecomputeLayerwise, offload, Strategy::Keep];
    let curve = rok_curve(&inputs, &strategies, batches, &opts)?;
    for o in &curve.omitted {
        eprintln!("omitted {} at batch {}: {}", o.strategy, o.batch, o.reason);
    }
    let rows: Vec<Vec<String>> = curve
        .points
        .iter()
        .map(|p| {
            vec![
                p.strategy.name().to_string(),
                p.batch_size.to_string(),
                format!("{:.4}", p.peak_bytes / GIB),
                format!("{:.3}", p.model_throughput / 1e12),
                format!("{:.6}", p.step_time),
            ]
        })
        .collect();
    eprintln!(
        "{} points, {} omitted",
        curve.points.len(),
        curve.omitted.len()
    );
    let mut out = Output::new(cli, "rok", cfg)?;
    let offload_plan = match &strategies[1] {
        Strategy::Offload(Some(p)) => format!("all, prefetch depth {:?}", p.prefetch_depth),
        _ => "planner budget".to_string(),
    };
    out.manifest.flag("offload_plan", offload_plan);
    out.csv("rok.csv", &ROK_COLUMNS, &rows)?;
    out.finish()
}

/// Estimate, reference and relative deviation for each reference row, using
/// the activation profile `profile`.
pub fn validation_table(profile: &ActivationProfile) -> Vec<(String, f64, f64, f64)> {
    VALIDATION_ROWS
        .iter()
        .map(|&(h, l, reference)| {
            let m = crate::config::ModelConfig::bert(h, l);
            let est =
                activations_per_step(&m, &ParallelismConfig::tensor_parallel(2), profile) / GIB;
            (
                format!("H{h}-L{l}"),
                est,
                reference,
                (est - reference) / reference,
            )
        })
        .collect()
}

fn validate(cli: &Cli, cfg: &ConfigFile) -> Result<(), CliError> {
    let table = validation_table(&cfg.activation_profile);
    eprintln!(
        "{:<12} {:>12} {:>12} {:>10}",
        "model", "estimate GiB", "reference", "dev %"
    );
    let mut rows = Vec::new();
    let mut failed = 0;
    for (name, est, reference, dev) in &table {
        let ok = dev.abs() <= VALIDATION_TOLERANCE;
        failed += usize::from(!ok);
        eprintln!(
            "{name:<12} {est:>12.2} {reference:>12.2} {:>+10.2} {}",
            dev * 100.0,
            if ok { "ok" } else { "FAIL" }
        );
        rows.push(vec![
            name.clone(),
            format!("{est:.4}"),
            format!("{reference:.2}"),
            format!("{:.3}", dev * 100.0),
        ]);
    }
    if cli.common.out.is_some() {
        let mut out = Output::new(cli, "validate", cfg)?;
        out.csv("validate.csv", &VALIDATE_COLUMNS, &rows)?;
        out.finish()?;
    }
    if failed > 0 {
        return Err(CliError::ValidationFailed(failed, table.len()));
    }
    Ok(())
}

/// Compute budgets for the scaling fit: 1e18 to 1e26 FLOPs.
pub fn scaling_computes() -> Vec<f64> {
    (0..=16)
        .map(|i| 10f64.powf(18.0 + 0.5 * i as f64))
        .collect()
}

fn scaling(cli: &Cli, cfg: &ConfigFile) -> Result<(), CliError> {
    let computes = scaling_computes();
    let mut rows = Vec::new();
    for (name, q) in [
        ("activations", ScalingQuantity::Activations),
        ("others", ScalingQuantity::Others),
        ("checkpointed", ScalingQuantity::Checkpointed),
    ] {
        let k = scaling_exponent_fit(&synthetic_sweep(q, &computes))?;
        eprintln!("{name:<14} exponent {k:.6}");
        rows.push(vec![name.to_string(), format!("{k:.9}")]);
    }
    if cli.common.out.is_some() {
        let mut out = Output::new(cli, "scaling", cfg)?;
        out.csv("scaling.csv", &SCALING_COLUMNS, &rows)?;
        out.finish()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Validate;

    fn run_in(dir: &Path, args: &[&str]) -> i32 {
        let mut v = vec!["actoffload".to_string()];
        v.extend(args.iter().map(|s| s.to_string()));
        v.push("--out".into());
        v.push(dir.display().to_string());
        run(v)
    }

    #[test]
    fn validate_passes_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_in(dir.path(), &["validate"]), EXIT_OK);
        assert!(dir.path().join("manifest.json").exists());
        for (_, _, _, dev) in validation_table(&ActivationProfile::default()) {
            assert!(dev.abs() <= VALIDATION_TOLERANCE);
        }
    }

    #[test]
    fn doubled_shared_coefficient_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("doubled.toml");
        std::fs::write(&cfg, "[activation_profile]\nshared_coeff = 20.0\n").unwrap();
        let code = run_in(dir.path(), &["validate", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, EXIT_VALIDATE);
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_in(dir.path(), &["project", "--config", "/nonexistent/x.toml"]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn invalid_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.toml");
        std::fs::write(&cfg, "[parallelism]\ntp_degree = 0\n").unwrap();
        assert_eq!(
            run_in(dir.path(), &["project", "--config", cfg.to_str().unwrap()]),
            EXIT_CONFIG
        );
    }

    #[test]
    fn project_writes_all_columns() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_in(dir.path(), &["project"]), EXIT_OK);
        let text = std::fs::read_to_string(dir.path().join("project.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), PROJECT_COLUMNS.join(","));
        assert_eq!(lines.count(), 8);
        let m = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.outputs[0].columns, PROJECT_COLUMNS);
    }

    #[test]
    fn simulate_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(run_in(a.path(), &["simulate", "--seed", "3"]), EXIT_OK);
        assert_eq!(run_in(b.path(), &["simulate", "--seed", "3"]), EXIT_OK);
        for f in ["trace.csv", "metrics.csv"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }

    #[test]
    fn rok_and_scaling_run() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_in(dir.path(), &["rok", "--batches", "8,16"]), EXIT_OK);
        let text = std::fs::read_to_string(dir.path().join("rok.csv")).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert_eq!(run_in(dir.path(), &["scaling"]), EXIT_OK);
        let text = std::fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
        assert!(text.contains("activations,0.833333333"));
    }

    #[test]
    fn bad_flags_exit_one() {
        assert_eq!(
            run(["actoffload", "simulate", "--clock", "sundial"]),
            EXIT_CONFIG
        );
        assert_eq!(
            run(["actoffload", "simulate", "--shrink", "0"]),
            EXIT_CONFIG
        );
    }

    #[test]
    fn config_round_trips_through_defaults() {
        let cfg = default_config();
        assert!(cfg.clone().validate().is_ok());
        assert_eq!(ConfigFile::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
