use std::collections::HashMap;

use crate::model::{occupancy_of, prefix_len, ClassIndex, Occupancy, SystemState, ValidatedConfig};

use super::solver::SparseGenerator;
use super::{ExactChain, OracleError};

pub const DEFAULT_STATE_BUDGET: usize = 200_000;

/// Number of ordered states with at most `max_len` jobs, or `None` on
/// overflow.
pub fn count_states(num_classes: usize, max_len: usize) -> Option<usize> {
    let mut total = 0usize;
    let mut level = 1usize;
    for _ in 0..=max_len {
        total = total.checked_add(level)?;
        level = level.checked_mul(num_classes)?;
    }
    Some(total)
}

/// All ordered states with at most `max_len` jobs, shortest first and
/// lexicographic within a length.
pub fn enumerate_states(
    cfg: &ValidatedConfig,
    max_len: usize,
    budget: usize,
) -> Result<Vec<SystemState>, OracleError> {
    let k = cfg.num_classes();
    let states = count_states(k, max_len).unwrap_or(usize::MAX);
    if states > budget {
        return Err(OracleError::BudgetExceeded { states, budget });
    }
    let mut out = Vec::with_capacity(states);
    for len in 0..=max_len {
        let mut word = vec![0; len];
        loop {
            out.push(SystemState::from_classes(word.clone()));
            // odometer increment, last position fastest
            let mut wrapped = true;
            for digit in word.iter_mut().rev() {
                *digit += 1;
                if *digit < k {
                    wrapped = false;
                    break;
                }
                *digit = 0;
            }
            if wrapped {
                break;
            }
        }
    }
    Ok(out)
}

/// The ordered-state CTMC truncated at `truncation` jobs. Arrivals into a
/// full state are dropped; such states are flagged as boundary states.
#[derive(Debug, Clone)]
pub struct TruncatedChain {
    states: Vec<SystemState>,
    occupancy: Vec<Occupancy>,
    generator: SparseGenerator,
    truncation: usize,
}

impl TruncatedChain {
    pub fn new(cfg: &ValidatedConfig, max_len: usize) -> Result<Self, OracleError> {
        Self::with_budget(cfg, max_len, DEFAULT_STATE_BUDGET)
    }

    pub fn with_budget(cfg: &ValidatedConfig, max_len: usize, budget: usize) -> Result<Self, OracleError> {
        let states = enumerate_states(cfg, max_len, budget)?;
        Ok(build_generator(states, cfg))
    }

    pub fn states(&self) -> &[SystemState] {
        &self.states
    }

    pub fn index_of(&self, state: &SystemState) -> Option<usize> {
        self.states.binary_search_by(|s| {
            s.jobs.len().cmp(&state.jobs.len()).then_with(|| s.jobs.cmp(&state.jobs))
        }).ok()
    }

    pub fn occupancy(&self, state: usize) -> &Occupancy {
        &self.occupancy[state]
    }
}

/// Builds the generator over `states`, which must be closed under removing a
/// job and under appending one below the longest length present.
pub fn build_generator(states: Vec<SystemState>, cfg: &ValidatedConfig) -> TruncatedChain {
    let truncation = states.iter().map(SystemState::len).max().unwrap_or(0);
    let index: HashMap<&[ClassIndex], usize> = states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.jobs.as_slice(), i))
        .collect();
    let mut rows = Vec::with_capacity(states.len());
    let mut occupancy = Vec::with_capacity(states.len());
    let mut buf = Vec::new();
    for s in &states {
        let mut row = Vec::new();
        if s.len() < truncation {
            for (class, &lambda) in cfg.arrival_rates().iter().enumerate() {
                if lambda > 0.0 {
                    buf.clear();
                    buf.extend_from_slice(&s.jobs);
                    buf.push(class);
                    row.push((index[buf.as_slice()], lambda));
                }
            }
        }
        let prefix = prefix_len(&s.jobs, cfg);
        for pos in 0..prefix {
            buf.clear();
            buf.extend_from_slice(&s.jobs[..pos]);
            buf.extend_from_slice(&s.jobs[pos + 1..]);
            row.push((index[buf.as_slice()], cfg.service_rates()[s.jobs[pos]]));
        }
        rows.push(row);
        occupancy.push(occupancy_of(&s.jobs, prefix, cfg));
    }
    TruncatedChain {
        generator: SparseGenerator::from_rows(rows),
        states,
        occupancy,
        truncation,
    }
}

impl ExactChain for TruncatedChain {
    fn generator(&self) -> &SparseGenerator {
        &self.generator
    }

    fn truncation(&self) -> usize {
        self.truncation
    }

    fn is_boundary(&self, state: usize) -> bool {
        self.states[state].len() == self.truncation
    }

    fn busy_servers(&self, state: usize) -> u32 {
        self.occupancy[state].busy_servers
    }

    fn queue_len(&self, state: usize) -> u32 {
        self.occupancy[state].queue_len()
    }

    fn expect_in_system(&self, state: usize, class: ClassIndex, f: &mut dyn FnMut(u32) -> f64) -> f64 {
        f(self.occupancy[state].in_system[class])
    }

    fn label(&self, state: usize) -> String {
        self.states[state].label()
    }
}
