//! Domain types for the FCFS multi-server-job model.
//!
//! A cluster has `n` identical servers and `K` job classes. A class-`i` job
//! holds `need_i` servers for an exponential service time with rate `mu_i`;
//! class-`i` jobs arrive as a Poisson stream of rate `lambda_i`. Jobs are
//! admitted strictly in arrival order, so the head of the queue blocks every
//! job behind it whenever it does not fit into the idle servers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drift::{stability_margin, StabilityMargin};

/// Index of a class inside a [`ClusterConfig`], zero-based.
///
/// Class ids shown to users (CSV columns, config documents) are one-based;
/// `ClassIndex(i)` corresponds to class id `i + 1`.
pub type ClassIndex = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobClassSpec {
    pub class_id: usize,
    pub server_need: u32,
    pub service_rate: f64,
    pub arrival_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub num_servers: u32,
    pub classes: Vec<JobClassSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadProfile {
    pub per_class: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("class list is empty")]
    EmptyClassList,
    #[error("cluster must have at least one server")]
    NoServers,
    #[error("class {class_id} needs {need} servers but the cluster has only {servers}")]
    NeedExceedsServers {
        class_id: usize,
        need: u32,
        servers: u32,
    },
    #[error("class {class_id} has a server need of zero")]
    ZeroNeed { class_id: usize },
    #[error("class {class_id}: {what} must be positive and finite, got {value}")]
    NonPositiveRate {
        class_id: usize,
        what: &'static str,
        value: f64,
    },
    #[error("class ids must be 1..={expected_max} in order, found {found} at position {position}")]
    BadClassId {
        position: usize,
        found: usize,
        expected_max: usize,
    },
}

impl ClusterConfig {
    pub fn new(num_servers: u32, classes: Vec<JobClassSpec>) -> Self {
        Self {
            num_servers,
            classes,
        }
    }

    /// Builds a config from parallel `(need, service_rate, arrival_rate)` triples,
    /// numbering classes 1..=K.
    pub fn from_triples(num_servers: u32, triples: &[(u32, f64, f64)]) -> Self {
        let classes = triples
            .iter()
            .enumerate()
            .map(|(i, &(need, mu, lambda))| JobClassSpec {
                class_id: i + 1,
                server_need: need,
                service_rate: mu,
                arrival_rate: lambda,
            })
            .collect();
        Self::new(num_servers, classes)
    }

    pub fn validate(self) -> Result<ValidatedConfig, ConfigError> {
        validate_config(self)
    }
}

/// A config that passed [`validate_config`], with its derived quantities.
///
/// Flat per-class vectors are cached because the simulator reads them on
/// every event.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedConfig {
    config: ClusterConfig,
    needs: Vec<u32>,
    service_rates: Vec<f64>,
    arrival_rates: Vec<f64>,
    max_need: u32,
    load: LoadProfile,
    stability: StabilityMargin,
}

impl ValidatedConfig {
    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }
    pub fn num_servers(&self) -> u32 {
        self.config.num_servers
    }
    pub fn num_classes(&self) -> usize {
        self.needs.len()
    }
    pub fn needs(&self) -> &[u32] {
        &self.needs
    }
    pub fn need(&self, class: ClassIndex) -> u32 {
        self.needs[class]
    }
    pub fn service_rates(&self) -> &[f64] {
        &self.service_rates
    }
    pub fn arrival_rates(&self) -> &[f64] {
        &self.arrival_rates
    }
    pub fn total_arrival_rate(&self) -> f64 {
        self.arrival_rates.iter().sum()
    }
    /// Fraction of arrivals that belong to each class (`lambda_i / sum lambda`).
    /// All zeros when nothing arrives.
    pub fn class_mix(&self) -> Vec<f64> {
        let total = self.total_arrival_rate();
        if total > 0.0 {
            self.arrival_rates.iter().map(|l| l / total).collect()
        } else {
            vec![0.0; self.num_classes()]
        }
    }
    pub fn max_need(&self) -> u32 {
        self.max_need
    }
    pub fn load(&self) -> &LoadProfile {
        &self.load
    }
    pub fn stability(&self) -> &StabilityMargin {
        &self.stability
    }
}

pub fn validate_config(cfg: ClusterConfig) -> Result<ValidatedConfig, ConfigError> {
    if cfg.classes.is_empty() {
        return Err(ConfigError::EmptyClassList);
    }
    if cfg.num_servers == 0 {
        return Err(ConfigError::NoServers);
    }
    let k = cfg.classes.len();
    for (position, class) in cfg.classes.iter().enumerate() {
        if class.class_id != position + 1 {
            return Err(ConfigError::BadClassId {
                position,
                found: class.class_id,
                expected_max: k,
            });
        }
        if class.server_need == 0 {
            return Err(ConfigError::ZeroNeed {
                class_id: class.class_id,
            });
        }
        if class.server_need > cfg.num_servers {
            return Err(ConfigError::NeedExceedsServers {
                class_id: class.class_id,
                need: class.server_need,
                servers: cfg.num_servers,
            });
        }
        if !(class.service_rate.is_finite() && class.service_rate > 0.0) {
            return Err(ConfigError::NonPositiveRate {
                class_id: class.class_id,
                what: "service rate",
                value: class.service_rate,
            });
        }
        // zero arrival rate is allowed, negative or NaN is not
        if !(class.arrival_rate.is_finite() && class.arrival_rate >= 0.0) {
            return Err(ConfigError::NonPositiveRate {
                class_id: class.class_id,
                what: "arrival rate",
                value: class.arrival_rate,
            });
        }
    }

    let needs: Vec<u32> = cfg.classes.iter().map(|c| c.server_need).collect();
    let service_rates: Vec<f64> = cfg.classes.iter().map(|c| c.service_rate).collect();
    let arrival_rates: Vec<f64> = cfg.classes.iter().map(|c| c.arrival_rate).collect();
    let max_need = needs.iter().copied().max().unwrap_or(1);
    let load = total_load(&cfg);
    let stability = stability_margin(load.total, max_need, cfg.num_servers);
    Ok(ValidatedConfig {
        config: cfg,
        needs,
        service_rates,
        arrival_rates,
        max_need,
        load,
        stability,
    })
}

/// `rho_i = lambda_i * need_i / (n * mu_i)` and their sum.
pub fn total_load(cfg: &ClusterConfig) -> LoadProfile {
    let n = f64::from(cfg.num_servers);
    let per_class: Vec<f64> = cfg
        .classes
        .iter()
        .map(|c| c.arrival_rate * f64::from(c.server_need) / (n * c.service_rate))
        .collect();
    let total = per_class.iter().sum();
    LoadProfile { per_class, total }
}

/// Inverse of [`total_load`]: `lambda_i = n * rho_i * mu_i / need_i`.
pub fn arrival_rates_from_loads(
    num_servers: u32,
    target_loads: &[f64],
    needs: &[u32],
    service_rates: &[f64],
) -> Vec<f64> {
    let n = f64::from(num_servers);
    target_loads
        .iter()
        .zip(needs)
        .zip(service_rates)
        .map(|((rho, &need), mu)| n * rho * mu / f64::from(need))
        .collect()
}

/// Ordered FCFS state: class indices of every job in the system, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct SystemState {
    pub jobs: Vec<ClassIndex>,
}

impl SystemState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_classes(jobs: impl Into<Vec<ClassIndex>>) -> Self {
        Self { jobs: jobs.into() }
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    /// Compact one-based rendering, e.g. `1.3.2`; the empty state is `-`.
    pub fn label(&self) -> String {
        if self.jobs.is_empty() {
            return "-".to_string();
        }
        self.jobs
            .iter()
            .map(|c| (c + 1).to_string())
            .collect::<Vec<_>>()
            .join(".")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Occupancy {
    pub in_system: Vec<u32>,
    pub in_queue: Vec<u32>,
    pub busy_servers: u32,
}

impl Occupancy {
    pub fn empty(num_classes: usize) -> Self {
        Self {
            in_system: vec![0; num_classes],
            in_queue: vec![0; num_classes],
            busy_servers: 0,
        }
    }

    pub fn in_service(&self, class: ClassIndex) -> u32 {
        self.in_system[class] - self.in_queue[class]
    }

    pub fn queue_len(&self) -> u32 {
        self.in_queue.iter().sum()
    }

    pub fn total_jobs(&self) -> u32 {
        self.in_system.iter().sum()
    }

    /// `sum_i need_i * x_i`: servers requested by every job present.
    pub fn requested_servers(&self, cfg: &ValidatedConfig) -> u64 {
        self.in_system
            .iter()
            .zip(cfg.needs())
            .map(|(&x, &m)| u64::from(x) * u64::from(m))
            .sum()
    }

    /// Checks the structural invariants against `cfg`. `head_need` is the
    /// need of the head-of-queue job, if any.
    pub fn check(&self, cfg: &ValidatedConfig, head_need: Option<u32>) -> Result<(), String> {
        let k = cfg.num_classes();
        if self.in_system.len() != k || self.in_queue.len() != k {
            return Err(format!("occupancy has wrong class count (expected {k})"));
        }
        let mut busy = 0u64;
        for i in 0..k {
            if self.in_queue[i] > self.in_system[i] {
                return Err(format!(
                    "class {}: {} queued but only {} in system",
                    i + 1,
                    self.in_queue[i],
                    self.in_system[i]
                ));
            }
            busy += u64::from(self.in_service(i)) * u64::from(cfg.need(i));
        }
        if busy != u64::from(self.busy_servers) {
            return Err(format!(
                "busy servers {} disagree with in-service needs {busy}",
                self.busy_servers
            ));
        }
        if busy > u64::from(cfg.num_servers()) {
            return Err(format!("{busy} busy servers exceed {}", cfg.num_servers()));
        }
        if self.queue_len() > 0 {
            let idle = cfg.num_servers() - self.busy_servers;
            match head_need {
                Some(need) if idle < need => {}
                Some(need) => {
                    return Err(format!(
                        "head job needing {need} servers is queued while {idle} servers idle"
                    ))
                }
                None => return Err("queue is nonempty but no head need was given".into()),
            }
        }
        Ok(())
    }
}

/// Splits an ordered state into its in-service prefix and its queue.
///
/// Jobs are scanned from the head; every job of the longest prefix whose
/// cumulative need fits in `n` servers is in service. The first job that
/// does not fit and every job after it are queued, even if some later job
/// would fit on its own.
pub fn in_service_prefix(state: &SystemState, cfg: &ValidatedConfig) -> Occupancy {
    let prefix = prefix_len(&state.jobs, cfg);
    occupancy_of(&state.jobs, prefix, cfg)
}

/// Number of jobs in the in-service prefix of `jobs`.
pub(crate) fn prefix_len(jobs: &[ClassIndex], cfg: &ValidatedConfig) -> usize {
    let n = cfg.num_servers();
    let mut used = 0u32;
    for (pos, &class) in jobs.iter().enumerate() {
        let need = cfg.need(class);
        if used + need > n {
            return pos;
        }
        used += need;
    }
    jobs.len()
}

pub(crate) fn occupancy_of(jobs: &[ClassIndex], prefix: usize, cfg: &ValidatedConfig) -> Occupancy {
    let mut occ = Occupancy::empty(cfg.num_classes());
    for (pos, &class) in jobs.iter().enumerate() {
        occ.in_system[class] += 1;
        if pos < prefix {
            occ.busy_servers += cfg.need(class);
        } else {
            occ.in_queue[class] += 1;
        }
    }
    occ
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg_with_needs(n: u32, needs: &[u32]) -> ValidatedConfig {
        let triples: Vec<_> = needs.iter().map(|&m| (m, 1.0, 0.1)).collect();
        ClusterConfig::from_triples(n, &triples).validate().unwrap()
    }

    #[test]
    fn validates_mixed_needs() {
        let cfg = cfg_with_needs(9, &[1, 2, 3, 4]);
        assert_eq!(cfg.max_need(), 4);
        assert_eq!(cfg.num_classes(), 4);
    }

    #[test]
    fn rejects_need_above_servers() {
        let err = ClusterConfig::from_triples(2, &[(3, 1.0, 1.0)])
            .validate()
            .unwrap_err();
        assert!(matches!(err, ConfigError::NeedExceedsServers { need: 3, servers: 2, .. }));
    }

    #[test]
    fn rejects_empty_and_bad_rates() {
        assert_eq!(
            ClusterConfig::new(4, vec![]).validate().unwrap_err(),
            ConfigError::EmptyClassList
        );
        assert!(matches!(
            ClusterConfig::from_triples(4, &[(1, 0.0, 1.0)]).validate(),
            Err(ConfigError::NonPositiveRate { what: "service rate", .. })
        ));
        assert!(matches!(
            ClusterConfig::from_triples(4, &[(1, 1.0, -1.0)]).validate(),
            Err(ConfigError::NonPositiveRate { what: "arrival rate", .. })
        ));
        assert!(matches!(
            ClusterConfig::from_triples(4, &[(0, 1.0, 1.0)]).validate(),
            Err(ConfigError::ZeroNeed { .. })
        ));
        let mut cfg = ClusterConfig::from_triples(4, &[(1, 1.0, 1.0), (1, 1.0, 1.0)]);
        cfg.classes[1].class_id = 5;
        assert!(matches!(cfg.validate(), Err(ConfigError::BadClassId { position: 1, .. })));
    }

    #[test]
    fn table_row_64_validates() {
        let needs = [3, 6, 8];
        let mu = [0.25, 0.5, 1.0];
        let rho = 1.0 - 0.25 * 64f64.powf(-0.1);
        let lambda = arrival_rates_from_loads(64, &[rho / 3.0; 3], &needs, &mu);
        let triples: Vec<_> = (0..3).map(|i| (needs[i], mu[i], lambda[i])).collect();
        let cfg = ClusterConfig::from_triples(64, &triples).validate().unwrap();
        assert_eq!(cfg.max_need(), 8);
        assert_eq!(format!("{:.4}", cfg.load().total), "0.8351");
    }

    #[test]
    fn load_of_single_class() {
        let cfg = ClusterConfig::from_triples(4, &[(2, 1.0, 1.0)]);
        assert_relative_eq!(total_load(&cfg).total, 0.5);
    }

    #[test]
    fn inverted_load_examples() {
        assert_relative_eq!(arrival_rates_from_loads(4, &[0.5], &[2], &[1.0])[0], 1.0);
        let lambda = arrival_rates_from_loads(1024, &[0.2917], &[32], &[1.0])[0];
        assert_relative_eq!(lambda, 1024.0 * 0.2917 / 32.0, max_relative = 1e-15);
        assert!((lambda - 9.334).abs() < 1e-3);
        assert_eq!(arrival_rates_from_loads(8, &[0.0], &[2], &[3.0])[0], 0.0);
    }

    #[test]
    fn head_of_line_blocking() {
        // A needs 1, B needs 3, C needs 1; n = 3
        let cfg = cfg_with_needs(3, &[1, 3, 1]);
        let occ = in_service_prefix(&SystemState::from_classes(vec![0, 1, 2]), &cfg);
        assert_eq!(occ.busy_servers, 1);
        assert_eq!(occ.in_system, vec![1, 1, 1]);
        assert_eq!(occ.in_queue, vec![0, 1, 1]);
        assert_eq!(cfg.num_servers() - occ.busy_servers, 2);
        occ.check(&cfg, Some(3)).unwrap();
    }

    #[test]
    fn empty_state_has_zero_occupancy() {
        let cfg = cfg_with_needs(3, &[1, 2]);
        assert_eq!(in_service_prefix(&SystemState::empty(), &cfg), Occupancy::empty(2));
    }

    #[test]
    fn nine_server_example() {
        // needs 1..=4 map to class indices 0..=3
        let cfg = cfg_with_needs(9, &[1, 2, 3, 4]);
        let order: Vec<usize> = [3, 1, 4, 3, 4, 1, 4, 1].iter().map(|m| m - 1).collect();
        let occ = in_service_prefix(&SystemState::from_classes(order), &cfg);
        assert_eq!(occ.busy_servers, 8);
        assert_eq!(occ.queue_len(), 5);
        assert_eq!(occ.total_jobs() - occ.queue_len(), 3);
        occ.check(&cfg, Some(3)).unwrap();
    }

    #[test]
    fn check_rejects_idle_fitting_head() {
        let cfg = cfg_with_needs(4, &[1]);
        let occ = Occupancy {
            in_system: vec![2],
            in_queue: vec![1],
            busy_servers: 1,
        };
        assert!(occ.check(&cfg, Some(1)).is_err());
    }

    proptest! {
        #[test]
        fn loads_round_trip(
            n in 1u32..5000,
            classes in prop::collection::vec((0.0f64..1.0, 1u32..64, 0.01f64..10.0), 1..6),
        ) {
            let classes: Vec<_> = classes.into_iter().map(|(r, m, mu)| (r, m.min(n), mu)).collect();
            let rho: Vec<f64> = classes.iter().map(|c| c.0).collect();
            let needs: Vec<u32> = classes.iter().map(|c| c.1).collect();
            let mu: Vec<f64> = classes.iter().map(|c| c.2).collect();
            let lambda = arrival_rates_from_loads(n, &rho, &needs, &mu);
            let triples: Vec<_> = (0..needs.len()).map(|i| (needs[i], mu[i], lambda[i])).collect();
            let load = total_load(&ClusterConfig::from_triples(n, &triples));
            for (got, want) in load.per_class.iter().zip(&rho) {
                prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300));
            }
            let sum: f64 = load.per_class.iter().sum();
            prop_assert!((load.total - sum).abs() <= 1e-12 * sum.max(1e-300));
        }

        #[test]
        fn prefix_rule_is_pure_and_consistent(
            needs in prop::collection::vec(1u32..6, 1..4),
            jobs in prop::collection::vec(0usize..4, 0..20),
        ) {
            let cfg = cfg_with_needs(6, &needs);
            let jobs: Vec<usize> = jobs.into_iter().map(|j| j % needs.len()).collect();
            let state = SystemState::from_classes(jobs.clone());
            let a = in_service_prefix(&state, &cfg);
            let b = in_service_prefix(&state, &cfg);
            prop_assert_eq!(&a, &b);
            let prefix = prefix_len(&jobs, &cfg);
            let head_need = jobs.get(prefix).map(|&c| cfg.need(c));
            prop_assert!(a.check(&cfg, head_need).is_ok());
        }
    }
}
