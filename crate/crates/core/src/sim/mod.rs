//! Seeded event-driven simulation of the FCFS multi-server-job system.
//!
//! A run is a single ChaCha stream consumed in event order, so identical
//! `(config, params)` pairs reproduce bit-identical summaries. Statistics are
//! taken at arrival epochs (what arriving jobs see) after a warmup prefix of
//! arrivals is discarded.

mod engine;

use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::fluid::FluidTrajectory;
use crate::model::{ClassIndex, SystemState, ValidatedConfig};
use crate::stats::{mean_and_std, segment_stats, SegmentStats, StatsError};

pub(crate) use engine::{Engine, Event, Randomness, SeededStream};

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.2;
pub const DEFAULT_SEGMENTS: usize = 10;
pub const DEFAULT_POST_WARMUP_ARRIVALS: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    NotEnoughSamples(#[from] StatsError),
    #[error("run did not retain per-arrival occupancy samples")]
    MissingSnapshots,
    #[error("class {class_id} has zero arrival rate; scaled counts are undefined")]
    ZeroArrivalRate { class_id: usize },
    #[error("invariant violated after event {event} at t={time}: {message}")]
    InvariantViolated {
        event: u64,
        time: f64,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimParams {
    pub seed: u64,
    pub total_arrivals: u64,
    pub warmup_fraction: f64,
    pub sample_every_arrival: bool,
    pub transient_sample_times: Option<Vec<f64>>,
    /// Replays the ordered state through the prefix rule after every event.
    /// Quadratic in the population; meant for tests.
    pub verify: bool,
}

impl SimParams {
    pub fn new(seed: u64, total_arrivals: u64) -> Self {
        Self {
            seed,
            total_arrivals,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            sample_every_arrival: false,
            transient_sample_times: None,
            verify: false,
        }
    }

    /// Sizes the run so that `post_warmup` arrivals remain after warmup.
    pub fn with_post_warmup(seed: u64, post_warmup: u64, warmup_fraction: f64) -> Self {
        let total = (post_warmup as f64 / (1.0 - warmup_fraction)).ceil() as u64;
        Self {
            warmup_fraction,
            ..Self::new(seed, total.max(post_warmup))
        }
    }

    pub fn sampling(mut self, on: bool) -> Self {
        self.sample_every_arrival = on;
        self
    }

    pub fn verified(mut self, on: bool) -> Self {
        self.verify = on;
        self
    }

    pub fn warmup_arrivals(&self) -> u64 {
        (self.total_arrivals as f64 * self.warmup_fraction).floor() as u64
    }

    fn check(&self) -> Result<(), SimError> {
        if self.total_arrivals == 0 {
            return Err(SimError::InvalidParams("total_arrivals must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(SimError::InvalidParams(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if let Some(times) = &self.transient_sample_times {
            if times.windows(2).any(|w| w[0] > w[1]) {
                return Err(SimError::InvalidParams("transient sample times must be sorted".into()));
            }
        }
        Ok(())
    }
}

/// What one post-warmup arrival experienced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ArrivalMark {
    pub class: u16,
    pub queued: bool,
}

/// Per-arrival snapshots: arrival time and the per-class counts the arrival
/// saw (excluding itself), stored flat with stride `K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrivalSnapshots {
    pub times: Vec<f64>,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransientSample {
    pub time: f64,
    pub in_system: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub num_classes: usize,
    pub arrivals: Vec<u64>,
    pub warmup_arrivals: u64,
    pub post_warmup_arrivals: Vec<u64>,
    pub queued_on_arrival: Vec<u64>,
    #[serde(skip)]
    pub marks: Vec<ArrivalMark>,
    #[serde(skip)]
    pub snapshots: Option<ArrivalSnapshots>,
    pub transient: Vec<TransientSample>,
    pub final_state: Vec<ClassIndex>,
    pub sim_time: f64,
    pub events: u64,
    /// Total load at or above one: the run executes but has no steady state.
    pub overloaded: bool,
}

impl RunSummary {
    pub fn total_arrivals(&self) -> u64 {
        self.arrivals.iter().sum()
    }
}

pub fn simulate(cfg: &ValidatedConfig, params: &SimParams) -> Result<RunSummary, SimError> {
    params.check()?;
    let k = cfg.num_classes();
    let warmup = params.warmup_arrivals();
    let mut engine = Engine::new(cfg, SeededStream::new(cfg, params.seed), &SystemState::empty());

    let mut arrivals = vec![0u64; k];
    let mut post = vec![0u64; k];
    let mut queued = vec![0u64; k];
    let post_capacity = params.total_arrivals.saturating_sub(warmup) as usize;
    let mut marks = Vec::with_capacity(post_capacity.min(1 << 26));
    let mut snapshots = params.sample_every_arrival.then(|| ArrivalSnapshots {
        times: Vec::with_capacity(post_capacity.min(1 << 26)),
        counts: Vec::with_capacity((post_capacity * k).min(1 << 28)),
    });
    let sample_times = params.transient_sample_times.as_deref().unwrap_or(&[]);
    let mut next_sample = 0;
    let mut transient = Vec::new();

    let mut seen = 0u64;
    let mut events = 0u64;
    while seen < params.total_arrivals {
        while next_sample < sample_times.len()
            && engine.next_event_time().is_none_or(|t| t > sample_times[next_sample])
        {
            transient.push(TransientSample {
                time: sample_times[next_sample],
                in_system: engine.in_system().to_vec(),
            });
            next_sample += 1;
        }
        let Some(event) = engine.step() else { break };
        events += 1;
        if params.verify {
            engine
                .verify(cfg)
                .map_err(|message| SimError::InvariantViolated {
                    event: events,
                    time: event.time(),
                    message,
                })?;
        }
        if let Event::Arrival { class, admitted, time } = event {
            arrivals[class] += 1;
            seen += 1;
            if seen > warmup {
                post[class] += 1;
                if !admitted {
                    queued[class] += 1;
                }
                marks.push(ArrivalMark {
                    class: class as u16,
                    queued: !admitted,
                });
                if let Some(snap) = snapshots.as_mut() {
                    snap.times.push(time);
                    let counts = engine.in_system();
                    snap.counts.extend(
                        counts
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| if i == class { x - 1 } else { x }),
                    );
                }
            }
        }
    }

    Ok(RunSummary {
        num_classes: k,
        arrivals,
        warmup_arrivals: warmup.min(seen),
        post_warmup_arrivals: post,
        queued_on_arrival: queued,
        marks,
        snapshots,
        transient,
        final_state: engine.ordered_state().0.jobs,
        sim_time: engine.now(),
        events,
        overloaded: cfg.load().total >= 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueingStats {
    pub overall: SegmentStats,
    /// `None` for classes with fewer post-warmup arrivals than segments.
    pub per_class: Vec<Option<SegmentStats>>,
}

/// Segment estimate of the probability that an arrival cannot start service
/// immediately, overall and per class.
pub fn estimate_queueing_probability(
    run: &RunSummary,
    segments: usize,
) -> Result<QueueingStats, SimError> {
    let indicator = |m: &ArrivalMark| if m.queued { 1.0 } else { 0.0 };
    let all: Vec<f64> = run.marks.iter().map(indicator).collect();
    let overall = segment_stats(&all, segments)?;
    let per_class = (0..run.num_classes)
        .map(|c| {
            let own: Vec<f64> = run
                .marks
                .iter()
                .filter(|m| usize::from(m.class) == c)
                .map(indicator)
                .collect();
            segment_stats(&own, segments).ok()
        })
        .collect();
    Ok(QueueingStats { overall, per_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaledCount {
    pub mean: f64,
    pub std: f64,
}

/// Mean and standard deviation of `x_i / lambda_i` over post-warmup arrival
/// epochs.
pub fn sample_scaled_counts(
    run: &RunSummary,
    cfg: &ValidatedConfig,
) -> Result<Vec<ScaledCount>, SimError> {
    let snap = run.snapshots.as_ref().ok_or(SimError::MissingSnapshots)?;
    let k = run.num_classes;
    let epochs = snap.times.len();
    if epochs == 0 {
        return Err(StatsError::NotEnoughSamples {
            needed: 1,
            available: 0,
        }
        .into());
    }
    (0..k)
        .map(|c| {
            let lambda = cfg.arrival_rates()[c];
            if lambda <= 0.0 {
                return Err(SimError::ZeroArrivalRate { class_id: c + 1 });
            }
            let values: Vec<f64> = snap
                .counts
                .iter()
                .skip(c)
                .step_by(k)
                .map(|&x| f64::from(x) / lambda)
                .collect();
            let (mean, std) = mean_and_std(&values);
            Ok(ScaledCount { mean, std })
        })
        .collect()
}

/// Samples `X_i(t) / lambda_i` at `t = 0, dt, 2 dt, ..., T` from `initial`.
/// Classes with zero arrival rate report raw counts.
pub fn transient_trajectory(
    cfg: &ValidatedConfig,
    initial: &SystemState,
    horizon: f64,
    sample_dt: f64,
    seed: u64,
) -> Result<FluidTrajectory, SimError> {
    if !(horizon > 0.0 && sample_dt > 0.0) {
        return Err(SimError::InvalidParams(format!(
            "horizon and sample_dt must be positive, got {horizon} and {sample_dt}"
        )));
    }
    let steps = (horizon / sample_dt + 1e-9).floor() as usize;
    let scale: Vec<f64> = cfg
        .arrival_rates()
        .iter()
        .map(|&l| if l > 0.0 { 1.0 / l } else { 1.0 })
        .collect();
    let mut engine = Engine::new(cfg, SeededStream::new(cfg, seed), initial);
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let t = step as f64 * sample_dt;
        while engine.next_event_time().is_some_and(|next| next <= t) {
            engine.step();
        }
        times.push(t);
        values.push(
            engine
                .in_system()
                .iter()
                .zip(&scale)
                .map(|(&x, s)| f64::from(x) * s)
                .collect(),
        );
    }
    Ok(FluidTrajectory { times, values })
}

/// Writes `arrival_index,time,class,queued_flag,x_1..x_K` for every retained
/// post-warmup arrival. Class ids are one-based.
pub fn write_trace_csv<W: Write>(run: &RunSummary, mut out: W) -> Result<(), SimError> {
    let snap = run.snapshots.as_ref().ok_or(SimError::MissingSnapshots)?;
    let k = run.num_classes;
    let io = |e: io::Error| SimError::InvalidParams(format!("trace write failed: {e}"));
    let mut header = String::from("arrival_index,time,class,queued_flag");
    for c in 1..=k {
        header.push_str(&format!(",x_{c}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for (j, (mark, time)) in run.marks.iter().zip(&snap.times).enumerate() {
        let index = run.warmup_arrivals + j as u64;
        let mut line = format!("{index},{time},{},{}", mark.class + 1, u8::from(mark.queued));
        for x in &snap.counts[j * k..(j + 1) * k] {
            line.push_str(&format!(",{x}"));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(())
}
