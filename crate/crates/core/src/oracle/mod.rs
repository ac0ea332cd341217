//! Exact stationary analysis of truncated chains on small instances.

mod full;
mod lumped;
mod solver;


use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::drift::{collapse_gap, drift_from_busy};
use crate::model::{ClassIndex, ValidatedConfig};

pub use full::{build_generator, count_states, enumerate_states, TruncatedChain, DEFAULT_STATE_BUDGET};
pub use lumped::{HolChain, HolState};
pub use solver::{SolveMethod, SolverOptions, SparseGenerator};

pub const DEFAULT_BOUNDARY_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("state space of {states} states exceeds the budget of {budget}")]
    BudgetExceeded { states: usize, budget: usize },
    #[error("power iteration stopped after {iterations} iterations at residual {residual:e}")]
    SolverDidNotConverge { iterations: usize, residual: f64 },
    #[error("state {state} has no path back towards the empty state")]
    Reducible { state: usize },
    #[error("chain has no states")]
    EmptyChain,
    #[error("boundary mass {boundary_mass:e} exceeds threshold {threshold:e}; raise the truncation length")]
    TruncationTooCoarse { boundary_mass: f64, threshold: f64 },
    #[error("offered load {offered_load} is not below {servers} servers")]
    UnstableOfferedLoad { servers: u32, offered_load: f64 },
}

/// View of a truncated chain needed by the stationary functionals.
pub trait ExactChain {
    fn generator(&self) -> &SparseGenerator;
    fn truncation(&self) -> usize;
    fn is_boundary(&self, state: usize) -> bool;
    fn busy_servers(&self, state: usize) -> u32;
    fn queue_len(&self, state: usize) -> u32;
    /// `E[f(X_class)]` given the chain is in `state`. Deterministic for the
    /// ordered chain, a binomial mixture for the lumped one.
    fn expect_in_system(&self, state: usize, class: ClassIndex, f: &mut dyn FnMut(u32) -> f64) -> f64;
    fn label(&self, state: usize) -> String;

    fn num_states(&self) -> usize {
        self.generator().num_states()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryDistribution {
    pub probabilities: Vec<f64>,
    pub residual: f64,
    pub boundary_mass: f64,
    pub method: SolveMethod,
}

pub fn stationary_distribution(chain: &dyn ExactChain) -> Result<StationaryDistribution, OracleError> {
    stationary_distribution_with(chain, &SolverOptions::default())
}

pub fn stationary_distribution_with(
    chain: &dyn ExactChain,
    opts: &SolverOptions,
) -> Result<StationaryDistribution, OracleError> {
    let (probabilities, method) = solver::solve(chain.generator(), opts)?;
    let residual = chain.generator().residual(&probabilities);
    let boundary_mass = probabilities
        .iter()
        .enumerate()
        .filter(|&(s, _)| chain.is_boundary(s))
        .map(|(_, p)| p)
        .sum();
    Ok(StationaryDistribution {
        probabilities,
        residual,
        boundary_mass,
        method,
    })
}

/// Solves the lumped chain at truncation lengths `step, 2 step, ...` up to
/// `max_len` and returns the first whose boundary mass is below `threshold`.
pub fn solve_until_converged(
    cfg: &ValidatedConfig,
    threshold: f64,
    step: usize,
    max_len: usize,
) -> Result<(HolChain, StationaryDistribution), OracleError> {
    let mut len = step.max(1);
    loop {
        let chain = HolChain::new(cfg, len)?;
        let dist = stationary_distribution(&chain)?;
        if dist.boundary_mass < threshold {
            return Ok((chain, dist));
        }
        if len + step > max_len {
            return Err(OracleError::TruncationTooCoarse {
                boundary_mass: dist.boundary_mass,
                threshold,
            });
        }
        len += step;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactQueueing {
    pub per_class: Vec<f64>,
    pub overall: f64,
    pub boundary_mass: f64,
}

pub fn exact_queueing_probability(
    dist: &StationaryDistribution,
    chain: &dyn ExactChain,
    cfg: &ValidatedConfig,
) -> Result<ExactQueueing, OracleError> {
    exact_queueing_probability_with(dist, chain, cfg, DEFAULT_BOUNDARY_THRESHOLD)
}

/// Probability that an arriving job of each class is not admitted at once:
/// the queue is nonempty or fewer than `m_i` servers are idle.
pub fn exact_queueing_probability_with(
    dist: &StationaryDistribution,
    chain: &dyn ExactChain,
    cfg: &ValidatedConfig,
    threshold: f64,
) -> Result<ExactQueueing, OracleError> {
    if dist.boundary_mass > threshold {
        return Err(OracleError::TruncationTooCoarse {
            boundary_mass: dist.boundary_mass,
            threshold,
        });
    }
    let n = cfg.num_servers();
    let mut per_class = vec![0.0; cfg.num_classes()];
    for (s, &p) in dist.probabilities.iter().enumerate() {
        let idle = n - chain.busy_servers(s);
        let waiting = chain.queue_len(s) > 0;
        for (class, pq) in per_class.iter_mut().enumerate() {
            if waiting || idle < cfg.need(class) {
                *pq += p;
            }
        }
    }
    let overall = cfg.class_mix().iter().zip(&per_class).map(|(w, p)| w * p).sum();
    Ok(ExactQueueing {
        per_class,
        overall,
        boundary_mass: dist.boundary_mass,
    })
}

/// `E_pi[Delta g]`, zero in steady state up to truncation leakage.
pub fn exact_mean_drift(dist: &StationaryDistribution, chain: &dyn ExactChain, cfg: &ValidatedConfig) -> f64 {
    dist.probabilities
        .iter()
        .enumerate()
        .map(|(s, &p)| p * drift_from_busy(f64::from(chain.busy_servers(s)), cfg))
        .sum()
}

/// `E_pi[(n rho_i - m_i X_i)^+]`.
pub fn expected_collapse_gap(
    dist: &StationaryDistribution,
    chain: &dyn ExactChain,
    cfg: &ValidatedConfig,
    class: ClassIndex,
) -> f64 {
    dist.probabilities
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p > 0.0)
        .map(|(s, &p)| p * chain.expect_in_system(s, class, &mut |x| collapse_gap(cfg, class, x)))
        .sum()
}

/// `E_pi[X_i]`.
pub fn expected_in_system(dist: &StationaryDistribution, chain: &dyn ExactChain, class: ClassIndex) -> f64 {
    dist.probabilities
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p > 0.0)
        .map(|(s, &p)| p * chain.expect_in_system(s, class, &mut f64::from))
        .sum()
}

/// Erlang-C waiting probability for `servers` servers at offered load `a`.
pub fn erlang_c(servers: u32, offered_load: f64) -> Result<f64, OracleError> {
    let c = f64::from(servers);
    if servers == 0 || !(offered_load >= 0.0) || offered_load >= c {
        return Err(OracleError::UnstableOfferedLoad {
            servers,
            offered_load,
        });
    }
    // Erlang-B recursion, then the B -> C conversion
    let mut b = 1.0;
    for k in 1..=servers {
        b = offered_load * b / (f64::from(k) + offered_load * b);
    }
    Ok(b / (1.0 - offered_load / c * (1.0 - b)))
}

/// Writes `state,probability` rows.
pub fn write_stationary_csv(
    dist: &StationaryDistribution,
    chain: &dyn ExactChain,
    mut out: impl Write,
) -> io::Result<()> {
    writeln!(out, "state,probability")?;
    for (s, p) in dist.probabilities.iter().enumerate() {
        writeln!(out, "\"{}\",{p:e}", chain.label(s))?;
    }
    Ok(())
}
