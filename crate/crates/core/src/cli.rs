//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{load_config, ConfigDocument, LoadConfigError};
use crate::drift::{bound_from_parts, ssc_bound, DriftError};
use crate::experiments::{
    run_set, run_sweep, scaling_sweep, ExperimentError, ResultTable, RunMetadata, SetId, SweepSpec,
};
use crate::fluid::{coupled_reference_run, coupling_safety_margin, fluid_integrate, fluid_path, FluidError, FluidParams};
use crate::model::{ConfigError, ValidatedConfig};
use crate::oracle::{
    exact_mean_drift, exact_queueing_probability_with, expected_collapse_gap, solve_until_converged,
    stationary_distribution, write_stationary_csv, ExactChain, HolChain, OracleError, TruncatedChain,
    DEFAULT_BOUNDARY_THRESHOLD,
};
use crate::sim::{
    estimate_queueing_probability, sample_scaled_counts, simulate, write_trace_csv, SimError, SimParams,
};
use crate::svg::{class_comparison_figure, per_class_figure, render, Metric};

pub const OUT_DIR_ENV: &str = "MSJQ_OUT_DIR";
pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "msjq", version, about = "FCFS multi-server-job queueing lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Configuration document (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to $MSJQ_OUT_DIR, then ./results.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed; overrides any seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Include n = 2^14 and 2^16 in the standard sets.
    #[arg(long, global = true)]
    pub long_run: bool,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Segments for the queueing-probability error bars.
    #[arg(long, global = true)]
    pub segments: Option<usize>,
    /// Post-warmup arrivals per run.
    #[arg(long, global = true)]
    pub arrivals: Option<u64>,
    #[arg(long, global = true)]
    pub warmup_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChainKind {
    /// Head-of-line lumped chain (small state space).
    Lumped,
    /// Every ordered state up to the truncation length.
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a [cluster] config and estimate queueing probabilities.
    Simulate {
        /// Also write the per-arrival trace CSV.
        #[arg(long)]
        trace: bool,
    },
    /// Solve the truncated chain of a small [cluster] config exactly.
    Exact {
        #[arg(long, value_enum, default_value_t = ChainKind::Lumped)]
        chain: ChainKind,
        /// Truncation length; by default grown until the boundary mass is small.
        #[arg(long)]
        truncation: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_BOUNDARY_THRESHOLD)]
        threshold: f64,
    },
    /// Stability condition and queueing-probability bound.
    Bound,
    /// Fluid trajectory of a [cluster] config.
    Fluid {
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Initial scaled counts, comma separated; zeros by default.
        #[arg(long, value_delimiter = ',')]
        y0: Option<Vec<f64>>,
        /// Use the RK4 integrator instead of the closed form.
        #[arg(long)]
        rk4: bool,
    },
    /// Coupled run against per-class reference queues.
    Couple {
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
    },
    /// Run the [sweep] of a config.
    Sweep,
    /// Reproduce a standard experiment set.
    Reproduce {
        #[arg(value_parser = parse_set)]
        set: SetId,
    },
}

fn parse_set(s: &str) -> Result<SetId, String> {
    s.parse()
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    ConfigParse(LoadConfigError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Validation(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Fluid(#[from] FluidError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigParse(LoadConfigError::Io { .. }) | CliError::Io { .. } => "IoError",
            CliError::ConfigParse(LoadConfigError::Parse { .. }) => "ConfigParseError",
            CliError::Validation(_) => "ValidationError",
            CliError::Usage(_) => "UsageError",
            CliError::Experiment(ExperimentError::Config { .. }) => "ValidationError",
            CliError::Experiment(_) => "ExperimentError",
            CliError::Oracle(_) => "OracleError",
            CliError::Sim(_) => "SimulationError",
            CliError::Fluid(_) => "FluidError",
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
/// Errors are printed to stderr as a single JSON object.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if code == 0 {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", json!({ "error": { "kind": "UsageError", "message": e.to_string().trim_end() } }));
            return code;
        }
    };
    match run(&cli) {
        Ok(report) => {
            if !report.is_empty() {
                println!("{report}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}

struct Ctx<'a> {
    common: &'a Common,
}

impl Ctx<'_> {
    fn out_dir(&self) -> PathBuf {
        self.common
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("results"))
    }

    fn ensure_out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out_dir();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(dir)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.ensure_out_dir()?.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn document(&self) -> Result<ConfigDocument, CliError> {
        let path = self
            .common
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs --config PATH".into()))?;
        load_config(path).map_err(CliError::ConfigParse)
    }

    fn cluster(&self) -> Result<(ValidatedConfig, Option<u64>), CliError> {
        match self.document()? {
            ConfigDocument::Cluster(doc) => Ok((doc.cluster().validate()?, doc.seed)),
            ConfigDocument::Sweep(_) => Err(CliError::Usage("this command needs a [cluster] document".into())),
        }
    }

    fn seed(&self, from_config: Option<u64>) -> u64 {
        self.common.seed.or(from_config).unwrap_or(DEFAULT_SEED)
    }

    fn sim_params(&self, seed: u64) -> SimParams {
        let warmup = self.common.warmup_fraction.unwrap_or(crate::sim::DEFAULT_WARMUP_FRACTION);
        let arrivals = self.common.arrivals.unwrap_or(crate::sim::DEFAULT_POST_WARMUP_ARRIVALS);
        SimParams::with_post_warmup(seed, arrivals, warmup)
    }

    fn segments(&self) -> usize {
        self.common.segments.unwrap_or(crate::sim::DEFAULT_SEGMENTS)
    }

    fn adjust_sweep(&self, spec: &mut SweepSpec, seed_from_config: bool) {
        if let Some(s) = self.common.seed {
            spec.sim.seed = s;
        } else if !seed_from_config {
            spec.sim.seed = DEFAULT_SEED;
        }
        if let Some(a) = self.common.arrivals {
            spec.sim.arrivals = a;
        }
        if let Some(w) = self.common.warmup_fraction {
            spec.sim.warmup_fraction = w;
        }
        if let Some(k) = self.common.segments {
            spec.sim.segments = k;
        }
    }

    /// Renders a report: JSON as-is, CSV as a `key,value` listing of the
    /// top-level scalars.
    fn report(&self, value: Value) -> String {
        match self.common.format {
            Format::Json => serde_json::to_string_pretty(&value).expect("report serializes"),
            Format::Csv => {
                let mut out = String::from("key,value\n");
                flatten("", &value, &mut out);
                out.trim_end().to_string()
            }
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                flatten(&format!("{prefix}.{}", i + 1), x, out);
            }
        }
        Value::Null => out.push_str(&format!("{prefix},\n")),
        Value::String(s) => out.push_str(&format!("{prefix},{s}\n")),
        other => out.push_str(&format!("{prefix},{other}\n")),
    }
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("serializable")
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let ctx = Ctx { common: &cli.common };
    if let Some(w) = cli.common.warmup_fraction {
        if !(0.0..1.0).contains(&w) {
            return Err(CliError::Usage(format!("--warmup-fraction must be in [0, 1), got {w}")));
        }
    }
    if cli.common.segments == Some(0) {
        return Err(CliError::Usage("--segments must be >= 1".into()));
    }
    match &cli.command {
        Command::Simulate { trace } => cmd_simulate(&ctx, *trace),
        Command::Exact {
            chain,
            truncation,
            threshold,
        } => cmd_exact(&ctx, *chain, *truncation, *threshold),
        Command::Bound => cmd_bound(&ctx),
        Command::Fluid { horizon, dt, y0, rk4 } => cmd_fluid(&ctx, *horizon, *dt, y0.clone(), *rk4),
        Command::Couple { horizon } => cmd_couple(&ctx, *horizon),
        Command::Sweep => cmd_sweep(&ctx),
        Command::Reproduce { set } => cmd_reproduce(&ctx, *set),
    }
}

fn cmd_simulate(ctx: &Ctx, trace: bool) -> Result<String, CliError> {
    let (cfg, cfg_seed) = ctx.cluster()?;
    let seed = ctx.seed(cfg_seed);
    let params = ctx.sim_params(seed).sampling(true);
    let run = simulate(&cfg, &params)?;
    let stats = estimate_queueing_probability(&run, ctx.segments())?;
    let scaled = sample_scaled_counts(&run, &cfg).ok();
    if trace {
        let path = ctx.ensure_out_dir()?.join("trace.csv");
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        write_trace_csv(&run, std::io::BufWriter::new(file))?;
    }
    let classes: Vec<Value> = (0..cfg.num_classes())
        .map(|c| {
            json!({
                "class_id": c + 1,
                "arrivals": run.arrivals[c],
                "post_warmup_arrivals": run.post_warmup_arrivals[c],
                "queued_on_arrival": run.queued_on_arrival[c],
                "p_queue": stats.per_class[c].map(|s| to_value(&s)),
                "scaled_count": scaled.as_ref().map(|v| to_value(&v[c])),
            })
        })
        .collect();
    let report = json!({
        "seed": seed,
        "rho_total": cfg.load().total,
        "provably_stable": cfg.stability().provably_stable,
        "overloaded": run.overloaded,
        "total_arrivals": run.total_arrivals(),
        "events": run.events,
        "simulated_time": run.sim_time,
        "p_queue_overall": to_value(&stats.overall),
        "classes": classes,
    });
    let text = ctx.report(report);
    let ext = ext(ctx);
    ctx.write(&format!("simulate.{ext}"), &text)?;
    Ok(text)
}

fn ext(ctx: &Ctx) -> &'static str {
    match ctx.common.format {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn cmd_exact(ctx: &Ctx, kind: ChainKind, truncation: Option<usize>, threshold: f64) -> Result<String, CliError> {
    let (cfg, _) = ctx.cluster()?;
    let chain: Box<dyn ExactChain> = match (kind, truncation) {
        (ChainKind::Lumped, None) => Box::new(solve_until_converged(&cfg, threshold, 20, 2000)?.0),
        (ChainKind::Lumped, Some(l)) => Box::new(HolChain::new(&cfg, l)?),
        (ChainKind::Full, l) => Box::new(TruncatedChain::new(&cfg, l.unwrap_or(8))?),
    };
    let dist = stationary_distribution(chain.as_ref())?;
    let pq = exact_queueing_probability_with(&dist, chain.as_ref(), &cfg, threshold);
    let gaps: Vec<Value> = (0..cfg.num_classes())
        .map(|c| {
            json!({
                "class_id": c + 1,
                "expected_collapse_gap": expected_collapse_gap(&dist, chain.as_ref(), &cfg, c),
                "collapse_bound": ssc_bound(&cfg, c),
            })
        })
        .collect();
    let report = json!({
        "chain": format!("{kind:?}").to_lowercase(),
        "truncation": chain.truncation(),
        "states": chain.num_states(),
        "method": to_value(&dist.method),
        "residual": dist.residual,
        "boundary_mass": dist.boundary_mass,
        "p_queue": match &pq {
            Ok(p) => to_value(p),
            Err(e) => json!({ "error": e.to_string() }),
        },
        "mean_drift": exact_mean_drift(&dist, chain.as_ref(), &cfg),
        "classes": gaps,
    });
    let mut csv = Vec::new();
    write_stationary_csv(&dist, chain.as_ref(), &mut csv).map_err(|e| io_err(Path::new("stationary.csv"), e))?;
    ctx.write("stationary.csv", &String::from_utf8(csv).expect("utf8"))?;
    let text = ctx.report(report);
    ctx.write(&format!("exact.{}", ext(ctx)), &text)?;
    Ok(text)
}

fn bound_report(cfg: &ValidatedConfig) -> Value {
    let n = cfg.num_servers();
    let st = cfg.stability();
    let bound = bound_from_parts(st.rho, cfg.num_classes(), cfg.max_need(), n);
    json!({
        "n": n,
        "num_classes": cfg.num_classes(),
        "max_need": cfg.max_need(),
        "rho": st.rho,
        "threshold": st.threshold,
        "provably_stable": st.provably_stable,
        "borderline": st.borderline,
        "bound_raw": bound.as_ref().ok().map(|b| b.raw),
        "bound_clamped": bound.as_ref().ok().map(|b| b.clamped),
        "bound_error": match bound {
            Err(DriftError::HypothesisViolated { .. }) => Some("load outside the bound's hypothesis"),
            Ok(_) => None,
        },
    })
}

fn cmd_bound(ctx: &Ctx) -> Result<String, CliError> {
    let report = match ctx.document()? {
        ConfigDocument::Cluster(doc) => bound_report(&doc.cluster().validate()?),
        ConfigDocument::Sweep(spec) => {
            Value::Array(scaling_sweep(&spec)?.iter().map(bound_report).collect())
        }
    };
    let text = ctx.report(report);
    ctx.write(&format!("bound.{}", ext(ctx)), &text)?;
    Ok(text)
}

fn cmd_fluid(ctx: &Ctx, horizon: f64, dt: f64, y0: Option<Vec<f64>>, rk4: bool) -> Result<String, CliError> {
    let (cfg, _) = ctx.cluster()?;
    let params = FluidParams::from_config(&cfg);
    let y0 = y0.unwrap_or_else(|| vec![0.0; cfg.num_classes()]);
    if y0.len() != cfg.num_classes() {
        return Err(CliError::Usage(format!("--y0 needs {} values", cfg.num_classes())));
    }
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(CliError::Usage("--horizon and --dt must be positive".into()));
    }
    let traj = if rk4 {
        fluid_integrate(&y0, &params, horizon, dt)?
    } else {
        let steps = (horizon / dt).round() as usize;
        let times: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        fluid_path(&y0, &params, &times)?
    };
    let csv = traj.to_csv();
    let path = ctx.write("fluid.csv", &csv)?;
    let margin = coupling_safety_margin(&y0, &params).ok();
    Ok(ctx.report(json!({
        "trajectory": path.display().to_string(),
        "samples": traj.times.len(),
        "coupling_safety_margin": margin,
    })))
}

fn cmd_couple(ctx: &Ctx, horizon: f64) -> Result<String, CliError> {
    let (cfg, cfg_seed) = ctx.cluster()?;
    if !(horizon > 0.0) {
        return Err(CliError::Usage("--horizon must be positive".into()));
    }
    let seed = ctx.seed(cfg_seed);
    let run = coupled_reference_run(&cfg, seed, horizon);
    let report = json!({
        "seed": seed,
        "horizon": horizon,
        "reference_servers": run.reference_servers,
        "first_divergence_time": run.first_divergence_time,
        "events_compared": run.events_compared,
        "identical_before_divergence": run.identical_before_divergence(),
        "first_mismatch": run.first_mismatch,
    });
    let text = ctx.report(report);
    ctx.write(&format!("couple.{}", ext(ctx)), &text)?;
    Ok(text)
}

fn write_table(ctx: &Ctx, label: &str, spec: &SweepSpec, table: &ResultTable) -> Result<Vec<PathBuf>, CliError> {
    let mut written = vec![ctx.write(&format!("{label}.csv"), &table.to_csv())?];
    written.push(ctx.write(&format!("{label}.meta.json"), &RunMetadata::new(label, spec, table).to_json())?);
    if ctx.common.format == Format::Json {
        let rows = serde_json::to_string_pretty(&table.rows).expect("rows serialize");
        written.push(ctx.write(&format!("{label}.json"), &rows)?);
    }
    Ok(written)
}

fn write_figures(ctx: &Ctx, label: &str, table: &ResultTable, title: &str) -> Result<Vec<PathBuf>, CliError> {
    Ok(vec![
        ctx.write(
            &format!("{label}-queueing.svg"),
            &render(&per_class_figure(table, Metric::QueueingProbability, &format!("{title}: queueing probability"))),
        )?,
        ctx.write(
            &format!("{label}-scaled-counts.svg"),
            &render(&per_class_figure(table, Metric::ScaledCount, &format!("{title}: scaled number of jobs"))),
        )?,
    ])
}

fn files_report(ctx: &Ctx, files: &[PathBuf]) -> String {
    ctx.report(json!({
        "files": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    }))
}

fn cmd_sweep(ctx: &Ctx) -> Result<String, CliError> {
    let ConfigDocument::Sweep(mut spec) = ctx.document()? else {
        return Err(CliError::Usage("sweep needs a [sweep] document".into()));
    };
    ctx.adjust_sweep(&mut spec, true);
    let table = run_sweep(&spec)?;
    let mut files = write_table(ctx, "sweep", &spec, &table)?;
    files.extend(write_figures(ctx, "sweep", &table, "sweep")?);
    Ok(files_report(ctx, &files))
}

fn cmd_reproduce(ctx: &Ctx, set: SetId) -> Result<String, CliError> {
    let results = run_set(set, ctx.common.long_run, |spec| ctx.adjust_sweep(spec, false))?;
    let mut files = Vec::new();
    for (label, spec, table) in &results {
        files.extend(write_table(ctx, label, spec, table)?);
    }
    match set {
        SetId::I | SetId::II => {
            let (label, _, table) = &results[0];
            let title = if set == SetId::I { "Set I" } else { "Set II" };
            files.extend(write_figures(ctx, label, table, title)?);
        }
        SetId::III => {
            let tables: Vec<(String, &ResultTable)> = results
                .iter()
                .map(|(label, _, t)| (label.trim_start_matches("set-iii-").to_string(), t))
                .collect();
            let fig = class_comparison_figure(&tables, 3, Metric::QueueingProbability, "Set III: largest class by need growth");
            files.push(ctx.write("set-iii-class3-queueing.svg", &render(&fig))?);
        }
    }
    Ok(files_report(ctx, &files))
}
