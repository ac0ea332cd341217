//! Scaling sweeps over the number of servers and the three standard
//! experiment sets.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::drift::{bound_from_parts, DriftError, ScalingRegime};
use crate::fluid::{fluid_path, sup_distance, FluidError, FluidParams};
use crate::model::{arrival_rates_from_loads, ClusterConfig, ConfigError, SystemState, ValidatedConfig};
use crate::sim::{
    estimate_queueing_probability, sample_scaled_counts, simulate, transient_trajectory, SimError, SimParams,
    DEFAULT_POST_WARMUP_ARRIVALS, DEFAULT_SEGMENTS, DEFAULT_WARMUP_FRACTION,
};
pub use crate::stats::segment_stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error("n={n}: {source}")]
    Config { n: u32, source: ConfigError },
    #[error("n={n}: {source}")]
    Sim { n: u32, source: SimError },
    #[error(transparent)]
    Fluid(#[from] FluidError),
}

/// Server need as a function of `n`, rounded to the nearest integer and
/// clamped to at least 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NeedProfile {
    Constant(u32),
    Log2,
    Sqrt,
    /// `c * n^(1/4)`
    QuarterRoot(f64),
    /// `log2(n) + k`
    Log2Plus(u32),
}

impl NeedProfile {
    pub fn at(&self, n: u32) -> u32 {
        let n = f64::from(n);
        let v = match *self {
            NeedProfile::Constant(c) => return c,
            NeedProfile::Log2 => n.log2(),
            NeedProfile::Sqrt => n.sqrt(),
            NeedProfile::QuarterRoot(c) => c * n.powf(0.25),
            NeedProfile::Log2Plus(k) => n.log2() + f64::from(k),
        };
        (v.round() as u32).max(1)
    }
}

impl fmt::Display for NeedProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeedProfile::Constant(c) => write!(f, "{c}"),
            NeedProfile::Log2 => write!(f, "log2(n)"),
            NeedProfile::Sqrt => write!(f, "sqrt(n)"),
            NeedProfile::QuarterRoot(c) => write!(f, "{c}*n^(1/4)"),
            NeedProfile::Log2Plus(k) => write!(f, "log2(n)+{k}"),
        }
    }
}

impl FromStr for NeedProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || format!("unknown need profile `{s}`; expected an integer, log2(n), sqrt(n), c*n^(1/4) or log2(n)+k");
        if let Ok(c) = t.parse::<u32>() {
            return if c == 0 { Err("server need must be >= 1".into()) } else { Ok(NeedProfile::Constant(c)) };
        }
        match t.as_str() {
            "log2(n)" => return Ok(NeedProfile::Log2),
            "sqrt(n)" => return Ok(NeedProfile::Sqrt),
            "n^(1/4)" => return Ok(NeedProfile::QuarterRoot(1.0)),
            _ => {}
        }
        if let Some(k) = t.strip_prefix("log2(n)+") {
            return k.parse().map(NeedProfile::Log2Plus).map_err(|_| bad());
        }
        if let Some(c) = t.strip_suffix("*n^(1/4)") {
            let c: f64 = c.parse().map_err(|_| bad())?;
            return if c > 0.0 { Ok(NeedProfile::QuarterRoot(c)) } else { Err(bad()) };
        }
        Err(bad())
    }
}

impl Serialize for NeedProfile {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            NeedProfile::Constant(c) => s.serialize_u32(*c),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for NeedProfile {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(0) => Err(serde::de::Error::custom("server need must be >= 1")),
            Raw::Int(c) => Ok(NeedProfile::Constant(c)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Total load as a function of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LoadRule {
    Regime(ScalingRegime),
    Fixed(FixedLoad),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedLoad {
    pub rho: f64,
}

impl LoadRule {
    pub fn at(&self, n: u32) -> f64 {
        match self {
            LoadRule::Regime(r) => r.load_at(n),
            LoadRule::Fixed(f) => f.rho,
        }
    }
}

/// How the total load is divided among classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SplitRule {
    EqualLoads,
    /// Load shares proportional to the given weights.
    Weights(Vec<f64>),
}

impl Default for SplitRule {
    fn default() -> Self {
        SplitRule::EqualLoads
    }
}

impl SplitRule {
    fn shares(&self, k: usize) -> Vec<f64> {
        match self {
            SplitRule::EqualLoads => vec![1.0 / k as f64; k],
            SplitRule::Weights(w) => {
                let total: f64 = w.iter().sum();
                w.iter().map(|x| x / total).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSim {
    #[serde(default)]
    pub seed: u64,
    /// Post-warmup arrivals per run.
    #[serde(default = "default_arrivals")]
    pub arrivals: u64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_segments")]
    pub segments: usize,
}

fn default_arrivals() -> u64 {
    DEFAULT_POST_WARMUP_ARRIVALS
}
fn default_warmup() -> f64 {
    DEFAULT_WARMUP_FRACTION
}
fn default_segments() -> usize {
    DEFAULT_SEGMENTS
}
fn default_replications() -> u32 {
    1
}

impl Default for SweepSim {
    fn default() -> Self {
        Self {
            seed: 0,
            arrivals: default_arrivals(),
            warmup_fraction: default_warmup(),
            segments: default_segments(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub n_values: Vec<u32>,
    pub load: LoadRule,
    pub needs: Vec<NeedProfile>,
    pub service_rates: Vec<f64>,
    #[serde(default)]
    pub split: SplitRule,
    #[serde(default)]
    pub sim: SweepSim,
    #[serde(default = "default_replications")]
    pub replications: u32,
}

impl SweepSpec {
    pub fn check(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidSpec(m));
        if self.n_values.is_empty() {
            return bad("n_values is empty".into());
        }
        if self.n_values.windows(2).any(|w| w[0] >= w[1]) {
            return bad("n_values must be strictly increasing".into());
        }
        if self.needs.is_empty() || self.needs.len() != self.service_rates.len() {
            return bad(format!(
                "{} need profiles but {} service rates",
                self.needs.len(),
                self.service_rates.len()
            ));
        }
        if let SplitRule::Weights(w) = &self.split {
            if w.len() != self.needs.len() || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad("split weights must be nonnegative, one per class, not all zero".into());
            }
        }
        if let LoadRule::Regime(r) = &self.load {
            r.check().map_err(ExperimentError::InvalidSpec)?;
        }
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        if self.sim.segments == 0 || self.sim.arrivals < self.sim.segments as u64 {
            return bad("need at least one post-warmup arrival per segment".into());
        }
        if !(0.0..1.0).contains(&self.sim.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn config_at(&self, n: u32) -> Result<ValidatedConfig, ExperimentError> {
        let rho = self.load.at(n);
        let needs: Vec<u32> = self.needs.iter().map(|p| p.at(n)).collect();
        let loads: Vec<f64> = self.split.shares(needs.len()).iter().map(|s| s * rho).collect();
        let lambda = arrival_rates_from_loads(n, &loads, &needs, &self.service_rates);
        let triples: Vec<_> = (0..needs.len())
            .map(|i| (needs[i], self.service_rates[i], lambda[i]))
            .collect();
        ClusterConfig::from_triples(n, &triples)
            .validate()
            .map_err(|source| ExperimentError::Config { n, source })
    }
}

/// One validated configuration per `n`.
pub fn scaling_sweep(spec: &SweepSpec) -> Result<Vec<ValidatedConfig>, ExperimentError> {
    spec.check()?;
    spec.n_values.iter().map(|&n| spec.config_at(n)).collect()
}

pub const DESK_SCALE_N: [u32; 4] = [1 << 6, 1 << 8, 1 << 10, 1 << 12];
pub const LONG_RUN_N: [u32; 6] = [1 << 6, 1 << 8, 1 << 10, 1 << 12, 1 << 14, 1 << 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SetId {
    I,
    II,
    III,
}

impl fmt::Display for SetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SetId::I => "set-i",
            SetId::II => "set-ii",
            SetId::III => "set-iii",
        })
    }
}

impl FromStr for SetId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "set-i" | "i" | "1" => Ok(SetId::I),
            "set-ii" | "ii" | "2" => Ok(SetId::II),
            "set-iii" | "iii" | "3" => Ok(SetId::III),
            _ => Err(format!("unknown experiment set `{s}`")),
        }
    }
}

const SET_RATES: [f64; 3] = [0.25, 0.5, 1.0];

fn set_spec(load: ScalingRegime, third: NeedProfile, long_run: bool) -> SweepSpec {
    SweepSpec {
        n_values: if long_run { LONG_RUN_N.to_vec() } else { DESK_SCALE_N.to_vec() },
        load: LoadRule::Regime(load),
        needs: vec![NeedProfile::Constant(3), NeedProfile::Log2, third],
        service_rates: SET_RATES.to_vec(),
        split: SplitRule::EqualLoads,
        sim: SweepSim::default(),
        replications: 1,
    }
}

const SET_I_LOAD: ScalingRegime = ScalingRegime {
    alpha: 0.1,
    beta: 0.25,
    gamma_need: 0.5,
};
const SET_II_LOAD: ScalingRegime = ScalingRegime {
    alpha: 0.3,
    beta: 1.0,
    gamma_need: 0.5,
};

/// The sweeps making up a standard set, each with a short label. Set III is
/// the Set I load with three growth rates for the largest need.
pub fn standard_set(set: SetId, long_run: bool) -> Vec<(String, SweepSpec)> {
    match set {
        SetId::I => vec![("set-i".into(), set_spec(SET_I_LOAD, NeedProfile::Sqrt, long_run))],
        SetId::II => vec![("set-ii".into(), set_spec(SET_II_LOAD, NeedProfile::Sqrt, long_run))],
        SetId::III => [
            ("sqrt", NeedProfile::Sqrt, 0.5),
            ("quarter-root", NeedProfile::QuarterRoot(3.0), 0.25),
            ("log2-plus-2", NeedProfile::Log2Plus(2), 0.0),
        ]
        .into_iter()
        .map(|(label, third, gamma)| {
            let load = ScalingRegime {
                gamma_need: gamma,
                ..SET_I_LOAD
            };
            (format!("set-iii-{label}"), set_spec(load, third, long_run))
        })
        .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub n: u32,
    pub class_id: usize,
    pub rho_total: f64,
    pub p_queue_mean: f64,
    pub p_queue_std: f64,
    /// `None` when the load is outside the bound's hypothesis.
    pub bound_raw: Option<f64>,
    pub bound_clamped: Option<f64>,
    pub scaled_count_mean: f64,
    pub scaled_count_std: f64,
    pub seed: u64,
    pub replication: u32,
}

/// Per-configuration facts that do not fit the row format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointMeta {
    pub n: u32,
    pub replication: u32,
    pub needs: Vec<u32>,
    pub arrival_rates: Vec<f64>,
    pub rho_total: f64,
    pub stability_threshold: f64,
    pub provably_stable: bool,
    pub bound_hypothesis_holds: bool,
    pub overloaded: bool,
    pub simulated_time: f64,
    pub events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub points: Vec<PointMeta>,
}

pub const CSV_HEADER: &str = "n,class_id,rho_total,p_queue_mean,p_queue_std,bound_raw,bound_clamped,\
scaled_count_mean,scaled_count_std,seed,replication";

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.n,
                r.class_id,
                r.rho_total,
                r.p_queue_mean,
                r.p_queue_std,
                opt(r.bound_raw),
                opt(r.bound_clamped),
                r.scaled_count_mean,
                r.scaled_count_std,
                r.seed,
                r.replication
            ));
        }
        out
    }

    /// Rows of one class, in increasing `n` then replication.
    pub fn class_rows(&self, class_id: usize) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.class_id == class_id).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.iter().map(|r| r.class_id).max().unwrap_or(0)
    }
}

/// Seed of replication `rep`: the base seed with the replication index
/// XORed in, shared by every `n` of a sweep.
pub fn replication_seed(base: u64, rep: u32) -> u64 {
    base ^ u64::from(rep)
}

fn run_point(spec: &SweepSpec, cfg: &ValidatedConfig, rep: u32) -> Result<(Vec<ResultRow>, PointMeta), ExperimentError> {
    let n = cfg.num_servers();
    let seed = replication_seed(spec.sim.seed, rep);
    let params = SimParams::with_post_warmup(seed, spec.sim.arrivals, spec.sim.warmup_fraction).sampling(true);
    let sim_err = |source| ExperimentError::Sim { n, source };
    let run = simulate(cfg, &params).map_err(sim_err)?;
    let pq = estimate_queueing_probability(&run, spec.sim.segments).map_err(sim_err)?;
    let scaled = sample_scaled_counts(&run, cfg).map_err(sim_err)?;
    let rho = cfg.load().total;
    let bound = match bound_from_parts(rho, cfg.num_classes(), cfg.max_need(), n) {
        Ok(b) => Some(b),
        Err(DriftError::HypothesisViolated { .. }) => None,
    };
    let rows = (0..cfg.num_classes())
        .map(|c| {
            let stats = pq.per_class[c].ok_or_else(|| {
                sim_err(SimError::InvalidParams(format!(
                    "class {} saw fewer post-warmup arrivals than segments",
                    c + 1
                )))
            })?;
            Ok(ResultRow {
                n,
                class_id: c + 1,
                rho_total: rho,
                p_queue_mean: stats.mean,
                p_queue_std: stats.std,
                bound_raw: bound.map(|b| b.raw),
                bound_clamped: bound.map(|b| b.clamped),
                scaled_count_mean: scaled[c].mean,
                scaled_count_std: scaled[c].std,
                seed,
                replication: rep,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let meta = PointMeta {
        n,
        replication: rep,
        needs: cfg.needs().to_vec(),
        arrival_rates: cfg.arrival_rates().to_vec(),
        rho_total: rho,
        stability_threshold: cfg.stability().threshold,
        provably_stable: cfg.stability().provably_stable,
        bound_hypothesis_holds: bound.is_some(),
        overloaded: run.overloaded,
        simulated_time: run.sim_time,
        events: run.events,
    };
    Ok((rows, meta))
}

/// Simulates every `(n, replication)` point of the sweep in parallel and
/// returns rows sorted by `(n, class, replication)`.
pub fn run_sweep(spec: &SweepSpec) -> Result<ResultTable, ExperimentError> {
    let configs = scaling_sweep(spec)?;
    let jobs: Vec<(&ValidatedConfig, u32)> = configs
        .iter()
        .flat_map(|cfg| (0..spec.replications).map(move |rep| (cfg, rep)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(cfg, rep)| run_point(spec, cfg, rep))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (r, p) in results {
        rows.extend(r);
        points.push(p);
    }
    rows.sort_by_key(|r| (r.n, r.class_id, r.replication));
    points.sort_by_key(|p| (p.n, p.replication));
    Ok(ResultTable { rows, points })
}

/// Runs a standard set, one table per sweep.
pub fn run_set(set: SetId, long_run: bool, adjust: impl Fn(&mut SweepSpec)) -> Result<Vec<(String, SweepSpec, ResultTable)>, ExperimentError> {
    standard_set(set, long_run)
        .into_iter()
        .map(|(label, mut spec)| {
            adjust(&mut spec);
            let table = run_sweep(&spec)?;
            Ok((label, spec, table))
        })
        .collect()
}

/// Run metadata written next to every result CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetadata {
    pub label: String,
    pub software_version: &'static str,
    pub spec: SweepSpec,
    pub class_split: String,
    pub seeds: Vec<u64>,
    pub need_rounding: &'static str,
    pub bound_column_note: &'static str,
    pub points: Vec<PointMeta>,
}

impl RunMetadata {
    pub fn new(label: &str, spec: &SweepSpec, table: &ResultTable) -> Self {
        Self {
            label: label.to_string(),
            software_version: env!("CARGO_PKG_VERSION"),
            spec: spec.clone(),
            class_split: match &spec.split {
                SplitRule::EqualLoads => "equal per-class loads rho_i = rho / K".into(),
                SplitRule::Weights(w) => format!("per-class loads proportional to {w:?}"),
            },
            seeds: (0..spec.replications)
                .map(|r| replication_seed(spec.sim.seed, r))
                .collect(),
            need_rounding: "round to nearest integer, at least 1",
            bound_column_note: "bound columns are empty where rho >= 1 - m_max/n",
            points: table.points.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serializes")
    }
}

/// Class-summed sup distance between the scaled simulated path from an empty
/// system and the closed-form fluid solution, averaged over `seeds`.
pub fn mean_transient_distance(
    cfg: &ValidatedConfig,
    seeds: &[u64],
    horizon: f64,
    sample_dt: f64,
) -> Result<f64, ExperimentError> {
    let params = FluidParams::from_config(cfg);
    let y0 = vec![0.0; cfg.num_classes()];
    let n = cfg.num_servers();
    let distances: Vec<f64> = seeds
        .par_iter()
        .map(|&seed| {
            let path = transient_trajectory(cfg, &SystemState::empty(), horizon, sample_dt, seed)
                .map_err(|source| ExperimentError::Sim { n, source })?;
            let fluid = fluid_path(&y0, &params, &path.times)?;
            Ok(sup_distance(&path, &fluid)?.summed)
        })
        .collect::<Result<_, ExperimentError>>()?;
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}
