//! Fluid model for the per-class scaled counts `X_i(t) / lambda_i`:
//! `y_i' = 1 - min(mu_i y_i, 1 / rho_i)`, with equilibrium `1 / mu_i`.
//!
//! Also hosts the coupled reference system in which each class gets its own
//! `floor(n / need_i)`-server FCFS queue, driven by the same arrivals and the
//! same per-class service draws as the real system.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ClassIndex, SystemState, ValidatedConfig};
use crate::sim::{Engine, Event, Randomness};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error("class {class_id}: initial value {y0} exceeds {limit}, outside the closed-form regime")]
    OutOfClosedFormRegime { class_id: usize, y0: f64, limit: f64 },
    #[error("initial condition violates the coupling hypothesis: {0}")]
    HypothesisViolated(String),
    #[error("sample grids differ: {0}")]
    GridMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Sampled per-class path; `values[t][i]` is class `i` at `times[t]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluidTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl FluidTrajectory {
    pub fn num_classes(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// `t,y_1..y_K` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.num_classes() {
            out.push_str(&format!(",y_{i}"));
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(&self.values) {
            out.push_str(&t.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Per-class `(mu_i, rho_i)` pairs that parameterize the fluid model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluidParams {
    pub service_rates: Vec<f64>,
    pub loads: Vec<f64>,
}

impl FluidParams {
    pub fn new(service_rates: Vec<f64>, loads: Vec<f64>) -> Self {
        assert_eq!(service_rates.len(), loads.len());
        Self {
            service_rates,
            loads,
        }
    }

    pub fn from_config(cfg: &ValidatedConfig) -> Self {
        Self::new(cfg.service_rates().to_vec(), cfg.load().per_class.clone())
    }

    pub fn num_classes(&self) -> usize {
        self.service_rates.len()
    }

    pub fn total_load(&self) -> f64 {
        self.loads.iter().sum()
    }

    fn rhs(&self, y: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let cap = if self.loads[i] > 0.0 {
                1.0 / self.loads[i]
            } else {
                f64::INFINITY
            };
            *o = 1.0 - (self.service_rates[i] * y[i]).min(cap);
        }
    }
}

pub fn equilibrium(cfg: &ValidatedConfig) -> Vec<f64> {
    cfg.service_rates().iter().map(|mu| 1.0 / mu).collect()
}

/// Closed-form solution `(y0 - 1/mu) e^{-mu t} + 1/mu`, valid while
/// `y0_i <= 1 / (mu_i rho_i)` for every class.
pub fn fluid_solution(y0: &[f64], params: &FluidParams, t: f64) -> Result<Vec<f64>, FluidError> {
    check_closed_form(y0, params)?;
    Ok(closed_form(y0, params, t))
}

fn check_closed_form(y0: &[f64], params: &FluidParams) -> Result<(), FluidError> {
    if y0.len() != params.num_classes() {
        return Err(FluidError::InvalidArgument(format!(
            "{} initial values for {} classes",
            y0.len(),
            params.num_classes()
        )));
    }
    for (i, &y) in y0.iter().enumerate() {
        let limit = 1.0 / (params.service_rates[i] * params.loads[i]);
        if y > limit || y.is_nan() {
            return Err(FluidError::OutOfClosedFormRegime {
                class_id: i + 1,
                y0: y,
                limit,
            });
        }
    }
    Ok(())
}

fn closed_form(y0: &[f64], params: &FluidParams, t: f64) -> Vec<f64> {
    y0.iter()
        .zip(&params.service_rates)
        .map(|(&y, &mu)| {
            let eq = 1.0 / mu;
            if y == eq {
                eq
            } else {
                (y - eq) * (-mu * t).exp() + eq
            }
        })
        .collect()
}

/// Closed-form path sampled on `times`.
pub fn fluid_path(y0: &[f64], params: &FluidParams, times: &[f64]) -> Result<FluidTrajectory, FluidError> {
    check_closed_form(y0, params)?;
    Ok(FluidTrajectory {
        times: times.to_vec(),
        values: times.iter().map(|&t| closed_form(y0, params, t)).collect(),
    })
}

/// Fixed-step RK4 on the full piecewise right-hand side, sampled at every
/// step `t_k = k dt` up to `round(T / dt)` steps.
pub fn fluid_integrate(
    y0: &[f64],
    params: &FluidParams,
    horizon: f64,
    dt: f64,
) -> Result<FluidTrajectory, FluidError> {
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(FluidError::InvalidArgument(format!(
            "horizon and dt must be positive, got {horizon} and {dt}"
        )));
    }
    if y0.len() != params.num_classes() || y0.iter().any(|y| !(y.is_finite() && *y >= 0.0)) {
        return Err(FluidError::InvalidArgument(
            "initial condition must be finite, nonnegative and match the class count".into(),
        ));
    }
    let k = y0.len();
    let steps = (horizon / dt).round() as usize;
    let mut y = y0.to_vec();
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    times.push(0.0);
    values.push(y.clone());
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    let mut tmp = vec![0.0; k];
    for step in 1..=steps {
        params.rhs(&y, &mut k1);
        for i in 0..k {
            tmp[i] = y[i] + 0.5 * dt * k1[i];
        }
        params.rhs(&tmp, &mut k2);
        for i in 0..k {
            tmp[i] = y[i] + 0.5 * dt * k2[i];
        }
        params.rhs(&tmp, &mut k3);
        for i in 0..k {
            tmp[i] = y[i] + dt * k3[i];
        }
        params.rhs(&tmp, &mut k4);
        for i in 0..k {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        times.push(step as f64 * dt);
        values.push(y.clone());
    }
    Ok(FluidTrajectory { times, values })
}

/// Slack `delta` such that staying within `delta` of the fluid path keeps
/// the coupled reference system within `n` servers.
pub fn coupling_safety_margin(y0: &[f64], params: &FluidParams) -> Result<f64, FluidError> {
    let rho = params.total_load();
    if !(rho > 0.0 && rho < 1.0) {
        return Err(FluidError::HypothesisViolated(format!(
            "total load must be in (0, 1), got {rho}"
        )));
    }
    if y0.len() != params.num_classes() {
        return Err(FluidError::InvalidArgument("class count mismatch".into()));
    }
    let mut used = 0.0;
    for (i, &y) in y0.iter().enumerate() {
        let mu = params.service_rates[i];
        let rho_i = params.loads[i];
        if !(y >= 0.0 && y < 1.0 / (rho * mu)) {
            return Err(FluidError::HypothesisViolated(format!(
                "class {}: y0 = {y} not in [0, {})",
                i + 1,
                1.0 / (rho * mu)
            )));
        }
        used += if y >= 1.0 / mu { rho_i * mu * y } else { rho_i };
    }
    let mu_max = params
        .service_rates
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((1.0 - used) / (mu_max * rho))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupDistance {
    /// `sup_t sum_i |a_i(t) - b_i(t)|`
    pub summed: f64,
    /// `sup_t |a_i(t) - b_i(t)|` per class
    pub per_class: Vec<f64>,
}

pub fn sup_distance(a: &FluidTrajectory, b: &FluidTrajectory) -> Result<SupDistance, FluidError> {
    if a.times.len() != b.times.len() {
        return Err(FluidError::GridMismatch(format!(
            "{} vs {} samples",
            a.times.len(),
            b.times.len()
        )));
    }
    for (ta, tb) in a.times.iter().zip(&b.times) {
        if (ta - tb).abs() > 1e-9 * ta.abs().max(1.0) {
            return Err(FluidError::GridMismatch(format!("time {ta} vs {tb}")));
        }
    }
    let k = a.num_classes();
    if b.num_classes() != k {
        return Err(FluidError::GridMismatch("class counts differ".into()));
    }
    let mut summed = 0.0f64;
    let mut per_class = vec![0.0f64; k];
    for (ra, rb) in a.values.iter().zip(&b.values) {
        let mut total = 0.0;
        for i in 0..k {
            let d = (ra[i] - rb[i]).abs();
            per_class[i] = per_class[i].max(d);
            total += d;
        }
        summed = summed.max(total);
    }
    Ok(SupDistance { summed, per_class })
}

/// Per-class counts right after an event.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathPoint {
    pub time: f64,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledRun {
    pub main: Vec<PathPoint>,
    pub reference: Vec<PathPoint>,
    /// Servers given to each class's reference queue, `floor(n / need_i)`.
    pub reference_servers: Vec<u32>,
    /// First time the reference system requests more than `n` servers.
    pub first_divergence_time: Option<f64>,
    /// Events strictly before the divergence time on which both paths were compared.
    pub events_compared: usize,
    /// Time of the first pre-divergence event where the two systems differ.
    pub first_mismatch: Option<f64>,
}

impl CoupledRun {
    pub fn identical_before_divergence(&self) -> bool {
        self.first_mismatch.is_none()
    }
}

/// Replays a fixed arrival list and fixed per-class service sequences; the
/// `j`-th admitted class-`i` job gets the `j`-th class-`i` draw.
struct Replay<'a> {
    arrivals: Vec<(f64, ClassIndex)>,
    next: usize,
    draws: &'a [Vec<f64>],
    used: Vec<usize>,
}

impl<'a> Replay<'a> {
    fn new(arrivals: Vec<(f64, ClassIndex)>, draws: &'a [Vec<f64>]) -> Self {
        Self {
            arrivals,
            next: 0,
            draws,
            used: vec![0; draws.len()],
        }
    }
}

impl Randomness for Replay<'_> {
    fn next_arrival(&mut self, _now: f64) -> Option<(f64, ClassIndex)> {
        let a = self.arrivals.get(self.next).copied();
        self.next += 1;
        a
    }

    fn service_time(&mut self, class: ClassIndex) -> f64 {
        let j = self.used[class];
        self.used[class] += 1;
        self.draws[class][j]
    }
}

fn run_path<R: Randomness>(mut engine: Engine<R>, horizon: f64, mut record: impl FnMut(f64, &[u32])) {
    while engine.next_event_time().is_some_and(|t| t <= horizon) {
        let event = engine.step().expect("event pending");
        let time = match event {
            Event::Arrival { time, .. } | Event::Departure { time, .. } => time,
        };
        record(time, engine.in_system());
    }
}

/// Runs the real system and the per-class reference queues on shared
/// randomness over `[0, horizon]`, starting empty.
///
/// Arrivals come from stream 0 of a ChaCha generator seeded with `seed`;
/// class `i` service times come from stream `i + 1`.
pub fn coupled_reference_run(cfg: &ValidatedConfig, seed: u64, horizon: f64) -> CoupledRun {
    let k = cfg.num_classes();
    let n = cfg.num_servers();

    let mut arrivals = Vec::new();
    let total = cfg.total_arrival_rate();
    if total > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gap = Exp::new(total).expect("positive rate");
        let pick = WeightedIndex::new(cfg.arrival_rates()).expect("valid weights");
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t > horizon {
                break;
            }
            arrivals.push((t, pick.sample(&mut rng)));
        }
    }
    let draws: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let count = arrivals.iter().filter(|a| a.1 == i).count();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let exp = Exp::new(cfg.service_rates()[i]).expect("validated rate");
            (0..count).map(|_| exp.sample(&mut rng)).collect()
        })
        .collect();

    let mut main = Vec::new();
    let engine = Engine::new(cfg, Replay::new(arrivals.clone(), &draws), &SystemState::empty());
    run_path(engine, horizon, |time, counts| {
        main.push(PathPoint {
            time,
            counts: counts.to_vec(),
        })
    });

    let reference_servers: Vec<u32> = cfg.needs().iter().map(|&m| n / m).collect();
    // (time, class, count after the event)
    let mut ref_events: Vec<(f64, ClassIndex, u32)> = Vec::new();
    for class in 0..k {
        let own: Vec<(f64, ClassIndex)> = arrivals
            .iter()
            .filter(|a| a.1 == class)
            .map(|&(t, _)| (t, 0))
            .collect();
        let own_draws = std::slice::from_ref(&draws[class]);
        let engine = Engine::with_servers(
            reference_servers[class],
            vec![1],
            Replay::new(own, own_draws),
            &SystemState::empty(),
        );
        run_path(engine, horizon, |time, counts| ref_events.push((time, class, counts[0])));
    }
    ref_events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut reference = Vec::with_capacity(ref_events.len());
    let mut counts = vec![0u32; k];
    let mut first_divergence_time = None;
    for (time, class, count) in ref_events {
        counts[class] = count;
        let requested: u64 = counts
            .iter()
            .zip(cfg.needs())
            .map(|(&y, &m)| u64::from(y) * u64::from(m))
            .sum();
        if first_divergence_time.is_none() && requested > u64::from(n) {
            first_divergence_time = Some(time);
        }
        reference.push(PathPoint {
            time,
            counts: counts.clone(),
        });
    }

    let cutoff = first_divergence_time.unwrap_or(f64::INFINITY);
    let before = |p: &&PathPoint| p.time < cutoff;
    let main_before: Vec<&PathPoint> = main.iter().filter(before).collect();
    let ref_before: Vec<&PathPoint> = reference.iter().filter(before).collect();
    let mut first_mismatch = None;
    for (a, b) in main_before.iter().zip(&ref_before) {
        if a != b {
            first_mismatch = Some(a.time.min(b.time));
            break;
        }
    }
    if first_mismatch.is_none() && main_before.len() != ref_before.len() {
        let shorter = main_before.len().min(ref_before.len());
        first_mismatch = main_before
            .get(shorter)
            .or(ref_before.get(shorter))
            .map(|p| p.time);
    }

    CoupledRun {
        events_compared: main_before.len().min(ref_before.len()),
        main,
        reference,
        reference_servers,
        first_divergence_time,
        first_mismatch,
    }
}
