use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::OracleError;

/// Off-diagonal transition rates, one row per state. The diagonal is the
/// negated row sum, so every row of the implied generator sums to zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseGenerator {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseGenerator {
    /// Rows may list the same target twice; entries are merged, sorted, and
    /// zero or self transitions dropped.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
                for (j, r) in row {
                    if j != i && r > 0.0 {
                        *merged.entry(j).or_insert(0.0) += r;
                    }
                }
                merged.into_iter().collect()
            })
            .collect();
        Self { rows }
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, state: usize) -> &[(usize, f64)] {
        &self.rows[state]
    }

    pub fn exit_rate(&self, state: usize) -> f64 {
        self.rows[state].iter().map(|&(_, r)| r).sum()
    }

    pub fn num_transitions(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `(pi Q)_j` for every state `j`.
    pub fn left_multiply(&self, pi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; pi.len()];
        for (i, row) in self.rows.iter().enumerate() {
            let mut exit = 0.0;
            for &(j, r) in row {
                out[j] += pi[i] * r;
                exit += r;
            }
            out[i] -= pi[i] * exit;
        }
        out
    }

    /// `max_j |(pi Q)_j|`.
    pub fn residual(&self, pi: &[f64]) -> f64 {
        self.left_multiply(pi)
            .into_iter()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveMethod {
    /// Grassmann-Taksar-Heyman state reduction (direct, subtraction-free).
    StateReduction,
    /// Power iteration on the uniformized chain.
    UniformizedPower,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub direct_limit: usize,
    /// The direct solver gives up, in favour of iteration, once fill-in
    /// exceeds this multiple of the generator's nonzeros.
    pub fill_factor: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            direct_limit: 50_000,
            fill_factor: 8,
            tolerance: 1e-10,
            max_iterations: 2_000_000,
        }
    }
}

pub(crate) fn solve(gen: &SparseGenerator, opts: &SolverOptions) -> Result<(Vec<f64>, SolveMethod), OracleError> {
    if gen.num_states() == 0 {
        return Err(OracleError::EmptyChain);
    }
    if gen.num_states() <= opts.direct_limit {
        let fill_limit = opts.fill_factor.saturating_mul(gen.num_transitions() + gen.num_states());
        if let Some(pi) = state_reduction(gen, fill_limit)? {
            return Ok((pi, SolveMethod::StateReduction));
        }
    }
    Ok((power_iteration(gen, opts)?, SolveMethod::UniformizedPower))
}

/// Eliminates states from the highest index down to 1, folding each one's
/// flows into the survivors, then back-substitutes from state 0. States
/// should be ordered by level so fill-in stays within neighbouring levels.
/// Returns `None` once more than `fill_limit` entries are stored.
pub(crate) fn state_reduction(gen: &SparseGenerator, fill_limit: usize) -> Result<Option<Vec<f64>>, OracleError> {
    let n = gen.num_states();
    let mut out: Vec<BTreeMap<usize, f64>> = (0..n)
        .map(|i| gen.row(i).iter().copied().collect())
        .collect();
    let mut incoming: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, row) in out.iter().enumerate() {
        for &j in row.keys() {
            incoming[j].insert(i);
        }
    }
    let mut stored = gen.num_transitions();
    let mut leave = vec![0.0; n];
    for k in (1..n).rev() {
        let outs: Vec<(usize, f64)> = out[k].range(..k).map(|(&j, &r)| (j, r)).collect();
        let total: f64 = outs.iter().map(|&(_, r)| r).sum();
        if total <= 0.0 {
            return Err(OracleError::Reducible { state: k });
        }
        leave[k] = total;
        let ins: Vec<(usize, f64)> = incoming[k]
            .range(..k)
            .map(|&i| (i, out[i][&k]))
            .collect();
        for &(i, into_k) in &ins {
            for &(j, from_k) in &outs {
                if i == j {
                    continue;
                }
                let entry = out[i].entry(j).or_insert_with(|| {
                    stored += 1;
                    0.0
                });
                *entry += into_k * from_k / total;
                incoming[j].insert(i);
            }
        }
        if stored > fill_limit {
            return Ok(None);
        }
    }
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    for k in 1..n {
        let inflow: f64 = incoming[k].range(..k).map(|&i| pi[i] * out[i][&k]).sum();
        pi[k] = inflow / leave[k];
    }
    let sum: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= sum);
    Ok(Some(pi))
}

pub(crate) fn power_iteration(gen: &SparseGenerator, opts: &SolverOptions) -> Result<Vec<f64>, OracleError> {
    let n = gen.num_states();
    let rate = (0..n).map(|i| gen.exit_rate(i)).fold(0.0, f64::max) * 1.05;
    if rate == 0.0 {
        let mut pi = vec![0.0; n];
        pi[0] = 1.0;
        return Ok(pi);
    }
    let mut pi = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        let flow = gen.left_multiply(&pi);
        residual = flow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if residual <= opts.tolerance {
            return Ok(pi);
        }
        for (p, f) in pi.iter_mut().zip(&flow) {
            *p = (*p + f / rate).max(0.0);
        }
        let sum: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= sum);
    }
    Err(OracleError::SolverDidNotConverge {
        iterations: opts.max_iterations,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Birth-death chain on 0..=cap with birth `a` and death `b`.
    fn birth_death(cap: usize, a: f64, b: f64) -> SparseGenerator {
        let rows = (0..=cap)
            .map(|i| {
                let mut row = vec![];
                if i < cap {
                    row.push((i + 1, a));
                }
                if i > 0 {
                    row.push((i - 1, b));
                }
                row
            })
            .collect();
        SparseGenerator::from_rows(rows)
    }

    #[test]
    fn both_solvers_match_geometric() {
        let gen = birth_death(30, 1.0, 2.0);
        let direct = state_reduction(&gen, usize::MAX).unwrap().unwrap();
        let opts = SolverOptions::default();
        let iter = power_iteration(&gen, &opts).unwrap();
        let norm: f64 = (0..=30).map(|j| 0.5f64.powi(j)).sum();
        for j in 0..=30 {
            let want = 0.5f64.powi(j as i32) / norm;
            assert_relative_eq!(direct[j], want, max_relative = 1e-12);
            assert!((iter[j] - want).abs() < 1e-8);
        }
        assert!(gen.residual(&direct) < 1e-14);
    }

    #[test]
    fn merges_duplicate_targets() {
        let gen = SparseGenerator::from_rows(vec![vec![(1, 1.0), (1, 2.0), (0, 5.0)], vec![(0, 1.0)]]);
        assert_eq!(gen.row(0), &[(1, 3.0)]);
        assert_eq!(gen.num_transitions(), 2);
    }

    #[test]
    fn flags_reducible_chain() {
        // state 1 cannot reach state 0
        let gen = SparseGenerator::from_rows(vec![vec![(1, 1.0)], vec![]]);
        assert!(matches!(state_reduction(&gen, usize::MAX), Err(OracleError::Reducible { state: 1 })));
    }

    #[test]
    fn gives_up_on_fill_in() {
        // every state talks to every other: elimination fills a dense block
        let n = 40;
        let rows = (0..n)
            .map(|i| (0..n).filter(|&j| j != i).map(|j| (j, 1.0)).collect())
            .collect();
        let gen = SparseGenerator::from_rows(rows);
        assert_eq!(state_reduction(&gen, 10).unwrap(), None);
        let (pi, method) = solve(&gen, &SolverOptions { fill_factor: 0, ..SolverOptions::default() }).unwrap();
        assert_eq!(method, SolveMethod::UniformizedPower);
        assert!((pi[7] - 1.0 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn reports_non_convergence() {
        let gen = birth_death(50, 1.0, 1.1);
        let opts = SolverOptions {
            max_iterations: 3,
            ..SolverOptions::default()
        };
        assert!(matches!(
            power_iteration(&gen, &opts),
            Err(OracleError::SolverDidNotConverge { iterations: 3, .. })
        ));
    }
}
