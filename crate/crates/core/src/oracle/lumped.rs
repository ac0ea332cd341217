use std::collections::HashMap;

use crate::model::{ClassIndex, ValidatedConfig};

use super::solver::SparseGenerator;
use super::{ExactChain, OracleError};

/// A state of the head-of-line chain.
///
/// Jobs behind the head of the queue have never been inspected by the
/// scheduler, so their classes are i.i.d. with law `lambda_i / Lambda` and
/// only their number matters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HolState {
    pub in_service: Vec<u32>,
    /// Class of the first waiting job, present iff `queue_len > 0`.
    pub head: Option<ClassIndex>,
    pub queue_len: u32,
}

impl HolState {
    pub fn total_jobs(&self) -> u32 {
        self.in_service.iter().sum::<u32>() + self.queue_len
    }
}

/// Lumped version of the ordered-state chain: same queueing probabilities,
/// drift and per-class count laws, but polynomially many states in the
/// truncation level.
#[derive(Debug, Clone)]
pub struct HolChain {
    states: Vec<HolState>,
    busy: Vec<u32>,
    generator: SparseGenerator,
    truncation: usize,
    mix: Vec<f64>,
    /// `binomial[r][class][k] = P(Bin(r, mix[class]) = k)`.
    binomial: Vec<Vec<Vec<f64>>>,
}

fn service_configs(cfg: &ValidatedConfig) -> Vec<Vec<u32>> {
    fn rec(cfg: &ValidatedConfig, class: usize, free: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if class == cfg.num_classes() {
            out.push(cur.clone());
            return;
        }
        let need = cfg.need(class);
        for c in 0..=free / need {
            cur.push(c);
            rec(cfg, class + 1, free - c * need, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(cfg, 0, cfg.num_servers(), &mut Vec::new(), &mut out);
    out
}

impl HolChain {
    pub fn new(cfg: &ValidatedConfig, truncation: usize) -> Result<Self, OracleError> {
        let n = cfg.num_servers();
        let busy_of = |s: &[u32]| -> u32 { s.iter().enumerate().map(|(i, &c)| c * cfg.need(i)).sum() };
        let configs = service_configs(cfg);
        let mix = cfg.class_mix();
        let mut states = Vec::new();
        for total in 0..=truncation as u32 {
            for s in &configs {
                let serving: u32 = s.iter().sum();
                if serving > total {
                    continue;
                }
                let q = total - serving;
                if q == 0 {
                    states.push(HolState {
                        in_service: s.clone(),
                        head: None,
                        queue_len: 0,
                    });
                    continue;
                }
                let idle = n - busy_of(s);
                for h in 0..cfg.num_classes() {
                    if cfg.need(h) > idle && mix[h] > 0.0 {
                        states.push(HolState {
                            in_service: s.clone(),
                            head: Some(h),
                            queue_len: q,
                        });
                    }
                }
            }
        }
        if states.len() > super::full::DEFAULT_STATE_BUDGET {
            return Err(OracleError::BudgetExceeded {
                states: states.len(),
                budget: super::full::DEFAULT_STATE_BUDGET,
            });
        }
        let index: HashMap<&HolState, usize> = states.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let busy: Vec<u32> = states.iter().map(|s| busy_of(&s.in_service)).collect();

        let mut rows = Vec::with_capacity(states.len());
        let mut targets = Vec::new();
        for (idx, st) in states.iter().enumerate() {
            let mut row = Vec::new();
            let idle = n - busy[idx];
            if (st.total_jobs() as usize) < truncation {
                if st.queue_len == 0 {
                    for (c, &lambda) in cfg.arrival_rates().iter().enumerate() {
                        if lambda <= 0.0 {
                            continue;
                        }
                        let mut next = st.clone();
                        if cfg.need(c) <= idle {
                            next.in_service[c] += 1;
                        } else {
                            next.head = Some(c);
                            next.queue_len = 1;
                        }
                        row.push((index[&next], lambda));
                    }
                } else {
                    let mut next = st.clone();
                    next.queue_len += 1;
                    row.push((index[&next], cfg.total_arrival_rate()));
                }
            }
            for j in 0..cfg.num_classes() {
                if st.in_service[j] == 0 {
                    continue;
                }
                let rate = cfg.service_rates()[j] * f64::from(st.in_service[j]);
                let mut after = st.clone();
                after.in_service[j] -= 1;
                targets.clear();
                admit(cfg, &mix, after, 1.0, &mut targets);
                for (t, p) in targets.drain(..) {
                    row.push((index[&t], rate * p));
                }
            }
            rows.push(row);
        }

        let binomial = (0..truncation.max(1))
            .map(|r| mix.iter().map(|&p| binomial_pmf(r, p)).collect())
            .collect();
        Ok(Self {
            generator: SparseGenerator::from_rows(rows),
            states,
            busy,
            truncation,
            mix,
            binomial,
        })
    }

    pub fn states(&self) -> &[HolState] {
        &self.states
    }

    pub fn class_mix(&self) -> &[f64] {
        &self.mix
    }
}

/// Moves fitting jobs from the head of the queue into service, drawing each
/// newly exposed head class from the mix.
fn admit(cfg: &ValidatedConfig, mix: &[f64], mut st: HolState, prob: f64, out: &mut Vec<(HolState, f64)>) {
    let Some(h) = st.head else {
        out.push((st, prob));
        return;
    };
    let busy: u32 = st.in_service.iter().enumerate().map(|(i, &c)| c * cfg.need(i)).sum();
    if cfg.num_servers() - busy < cfg.need(h) {
        out.push((st, prob));
        return;
    }
    st.in_service[h] += 1;
    st.queue_len -= 1;
    if st.queue_len == 0 {
        st.head = None;
        out.push((st, prob));
        return;
    }
    for (d, &p) in mix.iter().enumerate() {
        if p > 0.0 {
            let mut next = st.clone();
            next.head = Some(d);
            admit(cfg, mix, next, prob * p, out);
        }
    }
}

fn binomial_pmf(r: usize, p: f64) -> Vec<f64> {
    let mut pmf = vec![1.0];
    for _ in 0..r {
        let mut next = vec![0.0; pmf.len() + 1];
        for (k, &w) in pmf.iter().enumerate() {
            next[k] += w * (1.0 - p);
            next[k + 1] += w * p;
        }
        pmf = next;
    }
    pmf
}

impl ExactChain for HolChain {
    fn generator(&self) -> &SparseGenerator {
        &self.generator
    }

    fn truncation(&self) -> usize {
        self.truncation
    }

    fn is_boundary(&self, state: usize) -> bool {
        self.states[state].total_jobs() as usize == self.truncation
    }

    fn busy_servers(&self, state: usize) -> u32 {
        self.busy[state]
    }

    fn queue_len(&self, state: usize) -> u32 {
        self.states[state].queue_len
    }

    fn expect_in_system(&self, state: usize, class: ClassIndex, f: &mut dyn FnMut(u32) -> f64) -> f64 {
        let st = &self.states[state];
        let base = st.in_service[class] + u32::from(st.head == Some(class));
        if st.queue_len <= 1 {
            return f(base);
        }
        self.binomial[st.queue_len as usize - 1][class]
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(k, &w)| w * f(base + k as u32))
            .sum()
    }

    fn label(&self, state: usize) -> String {
        let st = &self.states[state];
        let serving: Vec<String> = st.in_service.iter().map(u32::to_string).collect();
        let head = st.head.map_or("-".to_string(), |h| (h + 1).to_string());
        format!("s=({}) head={} q={}", serving.join(" "), head, st.queue_len)
    }
}
