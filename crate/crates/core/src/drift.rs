//! Closed-form stability, bound and Lyapunov quantities.
//!
//! The work function `g(u) = sum_i need_i * x_i / mu_i` has drift
//! `n * rho - sum_i need_i * (x_i - q_i)`: arrivals add work at rate `n * rho`
//! and every busy server removes one unit of work per unit time.

use serde::Serialize;
use thiserror::Error;

use crate::model::{ClassIndex, Occupancy, ValidatedConfig};

/// Width of the band just below the stability threshold that is reported as
/// borderline instead of being silently classified.
pub const BORDERLINE_BAND: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DriftError {
    #[error("load {rho} is not below the stability threshold {threshold}")]
    HypothesisViolated { rho: f64, threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityMargin {
    pub rho: f64,
    pub threshold: f64,
    pub provably_stable: bool,
    pub borderline: bool,
}

/// `threshold = 1 - m_max / n`; stability is certified when `rho < threshold`.
pub fn stability_margin(rho: f64, max_need: u32, num_servers: u32) -> StabilityMargin {
    let threshold = 1.0 - f64::from(max_need) / f64::from(num_servers);
    let provably_stable = rho < threshold;
    StabilityMargin {
        rho,
        threshold,
        provably_stable,
        borderline: provably_stable && threshold - rho < BORDERLINE_BAND,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueueingBound {
    pub raw: f64,
    pub clamped: f64,
}

/// Upper bound on the steady-state probability that an arriving job waits:
/// `(3 K sqrt(m_max/n) + m_max/n) / (1 - rho)`, reported raw and clamped to 1.
pub fn queueing_probability_bound(cfg: &ValidatedConfig) -> Result<QueueingBound, DriftError> {
    bound_from_parts(
        cfg.load().total,
        cfg.num_classes(),
        cfg.max_need(),
        cfg.num_servers(),
    )
}

pub fn bound_from_parts(
    rho: f64,
    num_classes: usize,
    max_need: u32,
    num_servers: u32,
) -> Result<QueueingBound, DriftError> {
    let margin = stability_margin(rho, max_need, num_servers);
    if !margin.provably_stable {
        return Err(DriftError::HypothesisViolated {
            rho,
            threshold: margin.threshold,
        });
    }
    let ratio = f64::from(max_need) / f64::from(num_servers);
    let raw = (3.0 * num_classes as f64 * ratio.sqrt() + ratio) / (1.0 - rho);
    Ok(QueueingBound {
        raw,
        clamped: raw.min(1.0),
    })
}

/// Total expected remaining work, `sum_i need_i * x_i / mu_i`.
pub fn lyapunov_g(occ: &Occupancy, cfg: &ValidatedConfig) -> f64 {
    occ.in_system
        .iter()
        .enumerate()
        .map(|(i, &x)| f64::from(cfg.need(i)) * f64::from(x) / cfg.service_rates()[i])
        .sum()
}

/// Exact drift of [`lyapunov_g`]: `n * rho - sum_i need_i * (x_i - q_i)`.
pub fn drift_g(occ: &Occupancy, cfg: &ValidatedConfig) -> f64 {
    drift_from_busy(f64::from(occ.busy_servers), cfg)
}

pub(crate) fn drift_from_busy(busy: f64, cfg: &ValidatedConfig) -> f64 {
    f64::from(cfg.num_servers()) * cfg.load().total - busy
}

/// Two-case envelope `h`: `n rho - sum need_i x_i` while the requested
/// servers are at most `n - m_max`, and `-n (1 - rho)` otherwise.
pub fn envelope_h(occ: &Occupancy, cfg: &ValidatedConfig) -> f64 {
    let n = f64::from(cfg.num_servers());
    let rho = cfg.load().total;
    let requested = occ.requested_servers(cfg);
    if requested <= u64::from(cfg.num_servers() - cfg.max_need()) {
        n * rho - requested as f64
    } else {
        -n * (1.0 - rho)
    }
}

/// `(n rho_i - need_i x_i)^+`.
pub fn lyapunov_f(occ: &Occupancy, cfg: &ValidatedConfig, class: ClassIndex) -> f64 {
    collapse_gap(cfg, class, occ.in_system[class])
}

pub(crate) fn collapse_gap(cfg: &ValidatedConfig, class: ClassIndex, in_system: u32) -> f64 {
    let target = f64::from(cfg.num_servers()) * cfg.load().per_class[class];
    (target - f64::from(cfg.need(class)) * f64::from(in_system)).max(0.0)
}

/// Constants of the generic drift-to-tail bound for a Lyapunov function `V`.
///
/// `decay_gamma` is the drift decay rate (`Delta V <= -gamma` above the
/// threshold), unrelated to the need-scaling exponent in [`ScalingRegime`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftBoundParams {
    pub threshold_b: f64,
    pub decay_gamma: f64,
    pub max_jump_v: f64,
    pub up_rate_delta: f64,
}

impl DriftBoundParams {
    /// Instantiation for `V = (n rho_i - need_i x_i)^+`.
    pub fn state_space_collapse(num_servers: u32, need: u32, service_rate: f64) -> Self {
        let n = f64::from(num_servers);
        let m = f64::from(need);
        let root = (n * m).sqrt();
        Self {
            threshold_b: root,
            decay_gamma: service_rate * root,
            max_jump_v: m,
            up_rate_delta: n * service_rate,
        }
    }

    /// Instantiation for the work function `g`; needs `rho < 1 - m_max/n` for
    /// a positive decay rate.
    pub fn work(cfg: &ValidatedConfig) -> Self {
        let n = f64::from(cfg.num_servers());
        let m_max = f64::from(cfg.max_need());
        let rho = cfg.load().total;
        let mu_min = cfg
            .service_rates()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        Self {
            threshold_b: (n - m_max) / mu_min,
            decay_gamma: n * (1.0 - rho) - m_max,
            max_jump_v: m_max / mu_min,
            up_rate_delta: n * rho,
        }
    }
}

/// `P(V > B + 2 m v_max) <= (delta / (delta + gamma))^(m + 1)`, clamped to [0, 1].
pub fn drift_tail_bound(p: &DriftBoundParams, m: u32) -> f64 {
    let ratio = p.up_rate_delta / (p.up_rate_delta + p.decay_gamma);
    ratio.powi(m as i32 + 1).clamp(0.0, 1.0)
}

/// `E[V] <= B + 2 v_max delta / gamma`.
pub fn drift_moment_bound(p: &DriftBoundParams) -> f64 {
    p.threshold_b + 2.0 * p.max_jump_v * p.up_rate_delta / p.decay_gamma
}

/// `3 sqrt(n * need_i)`.
pub fn ssc_bound(cfg: &ValidatedConfig, class: ClassIndex) -> f64 {
    ssc_bound_for(cfg.num_servers(), cfg.need(class))
}

pub fn ssc_bound_for(num_servers: u32, need: u32) -> f64 {
    3.0 * (f64::from(num_servers) * f64::from(need)).sqrt()
}

/// Joint scaling of load and needs: `rho = 1 - beta n^-alpha`, `m_max ~ n^gamma_need`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingRegime {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub gamma_need: f64,
}

impl ScalingRegime {
    pub fn load_at(&self, num_servers: u32) -> f64 {
        1.0 - self.beta * f64::from(num_servers).powf(-self.alpha)
    }

    pub fn check(&self) -> Result<(), String> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(format!("beta must be in (0, 1], got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.gamma_need) {
            return Err(format!("gamma must be in [0, 1], got {}", self.gamma_need));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegimeClass {
    pub region: u8,
    pub diminishing: bool,
}

/// Region 1: constant load and needs; 2: constant load, scaling needs;
/// 3: heavy traffic, constant needs; 4: both scale. The queueing probability
/// bound vanishes when `2 alpha + gamma < 1`.
pub fn classify_regime(r: &ScalingRegime) -> RegimeClass {
    let region = match (r.alpha == 0.0, r.gamma_need == 0.0) {
        (true, true) => 1,
        (true, false) => 2,
        (false, true) => 3,
        (false, false) => 4,
    };
    RegimeClass {
        region,
        diminishing: 2.0 * r.alpha + r.gamma_need < 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{arrival_rates_from_loads, in_service_prefix, ClusterConfig, SystemState};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(n: u32, m: u32, rho: f64) -> ValidatedConfig {
        let lambda = arrival_rates_from_loads(n, &[rho], &[m], &[1.0])[0];
        ClusterConfig::from_triples(n, &[(m, 1.0, lambda)])
            .validate()
            .unwrap()
    }

    #[test]
    fn stability_threshold_examples() {
        let s = stability_margin(0.5, 4, 9);
        assert_relative_eq!(s.threshold, 5.0 / 9.0);
        assert!(s.provably_stable && !s.borderline);
        assert!(!stability_margin(0.6, 4, 9).provably_stable);
        let rho = 1.0 - 0.25 * 65536f64.powf(-0.1);
        let s = stability_margin(rho, 256, 65536);
        assert_eq!(format!("{:.5}", s.threshold), "0.99609");
        assert!(s.provably_stable);
        assert!(stability_margin(0.5 - 1e-10, 1, 2).borderline);
    }

    #[test]
    fn bound_examples() {
        let b = bound_from_parts(0.5, 1, 4, 65536).unwrap();
        let expected = 2.0 * (3.0 * (2.0 / 256.0) + 4.0 / 65536.0);
        assert_relative_eq!(b.raw, expected, max_relative = 1e-14);
        assert!((b.raw - 0.046997).abs() < 1e-6);

        let b = bound_from_parts(0.9175, 3, 256, 65536).unwrap();
        assert!((b.raw - 6.866).abs() < 5e-3, "{}", b.raw);
        assert_eq!(b.clamped, 1.0);

        let mut last = f64::INFINITY;
        for log_n in [10, 14, 18, 22, 26] {
            let b = bound_from_parts(0.5, 1, 4, 1 << log_n).unwrap();
            assert!(b.raw < last);
            last = b.raw;
        }
        assert!(last < 2e-3);

        assert!(matches!(
            bound_from_parts(0.9, 1, 4, 16),
            Err(DriftError::HypothesisViolated { .. })
        ));
    }

    #[test]
    fn set_one_bound_decreases_in_n() {
        let mut last = f64::INFINITY;
        for log_n in (6..=16).step_by(2) {
            let n = 1u32 << log_n;
            let rho = 1.0 - 0.25 * f64::from(n).powf(-0.1);
            let m_max = f64::from(n).sqrt().round() as u32;
            let b = bound_from_parts(rho, 3, m_max, n).unwrap();
            assert!(b.raw < last);
            assert!(b.clamped > 0.0 && b.clamped <= 1.0);
            last = b.raw;
        }
    }

    #[test]
    fn g_examples() {
        let cfg = ClusterConfig::from_triples(64, &[(3, 0.25, 1.0), (6, 0.5, 1.0)])
            .validate()
            .unwrap();
        let occ = in_service_prefix(&SystemState::from_classes(vec![0, 0, 1]), &cfg);
        assert_relative_eq!(lyapunov_g(&occ, &cfg), 36.0);
        assert_eq!(lyapunov_g(&Occupancy::empty(2), &cfg), 0.0);
        let one = in_service_prefix(&SystemState::from_classes(vec![1]), &cfg);
        assert_relative_eq!(lyapunov_g(&one, &cfg), 12.0);
    }

    #[test]
    fn drift_and_envelope_cases() {
        let cfg = single(8, 2, 0.5);
        let n_rho = 4.0;
        let empty = Occupancy::empty(1);
        assert_relative_eq!(drift_g(&empty, &cfg), n_rho);
        assert_relative_eq!(envelope_h(&empty, &cfg), n_rho);

        let full = in_service_prefix(&SystemState::from_classes(vec![0; 4]), &cfg);
        assert_relative_eq!(drift_g(&full, &cfg), 8.0 * (0.5 - 1.0));
        assert_relative_eq!(envelope_h(&full, &cfg), -8.0 * 0.5);

        // requested = n - m_max = 6 stays in the first case
        let edge = in_service_prefix(&SystemState::from_classes(vec![0; 3]), &cfg);
        assert_relative_eq!(envelope_h(&edge, &cfg), n_rho - 6.0);
    }

    #[test]
    fn f_examples() {
        let rho_i = 0.27837;
        let lambda = arrival_rates_from_loads(64, &[rho_i], &[3], &[0.25])[0];
        let cfg = ClusterConfig::from_triples(64, &[(3, 0.25, lambda)])
            .validate()
            .unwrap();
        let occ = in_service_prefix(&SystemState::from_classes(vec![0, 0]), &cfg);
        assert!((lyapunov_f(&occ, &cfg, 0) - 11.816).abs() < 1e-3);
        assert_relative_eq!(lyapunov_f(&Occupancy::empty(1), &cfg, 0), 64.0 * rho_i, max_relative = 1e-12);
        let many = in_service_prefix(&SystemState::from_classes(vec![0; 7]), &cfg);
        assert_eq!(lyapunov_f(&many, &cfg, 0), 0.0);
    }

    #[test]
    fn tail_and_moment_bounds() {
        let p = DriftBoundParams {
            threshold_b: 1.0,
            decay_gamma: 2.0,
            max_jump_v: 1.0,
            up_rate_delta: 2.0,
        };
        assert_relative_eq!(drift_tail_bound(&p, 0), 0.5);
        assert!(drift_tail_bound(&p, 200) < 1e-60);

        let ssc = DriftBoundParams::state_space_collapse(64, 4, 0.7);
        assert_relative_eq!(drift_tail_bound(&ssc, 3), 0.4096, max_relative = 1e-12);
        assert_relative_eq!(drift_moment_bound(&ssc), 48.0, max_relative = 1e-12);

        let far = DriftBoundParams { decay_gamma: 1e300, ..p };
        assert_relative_eq!(drift_moment_bound(&far), 1.0);
    }

    #[test]
    fn work_bound_matches_displayed_expression() {
        let cfg = ClusterConfig::from_triples(64, &[(3, 0.25, 2.0), (8, 1.0, 1.0)])
            .validate()
            .unwrap();
        let (n, m_max, rho, mu_min) = (64.0, 8.0, cfg.load().total, 0.25);
        let expected = (n - m_max) / mu_min
            + 2.0 * (m_max / mu_min) * (n * rho) / (n * (1.0 - rho) - m_max);
        let got = drift_moment_bound(&DriftBoundParams::work(&cfg));
        assert!(got.is_finite());
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }

    #[test]
    fn ssc_bound_examples() {
        assert_relative_eq!(ssc_bound_for(64, 4), 48.0);
        assert!((ssc_bound_for(1024, 32) - 543.06).abs() < 0.01);
    }

    #[test]
    fn regime_examples() {
        let c = |a, g| classify_regime(&ScalingRegime { alpha: a, beta: 0.5, gamma_need: g });
        assert_eq!(c(0.0, 0.0), RegimeClass { region: 1, diminishing: true });
        assert_eq!(c(0.0, 0.5), RegimeClass { region: 2, diminishing: true });
        assert_eq!(c(0.3, 0.0), RegimeClass { region: 3, diminishing: true });
        assert_eq!(c(0.1, 0.5), RegimeClass { region: 4, diminishing: true });
        assert_eq!(c(0.3, 0.5), RegimeClass { region: 4, diminishing: false });
    }

    proptest! {
        #[test]
        fn ssc_moment_formula_is_three_root(n in 1u32..1_000_000, m in 1u32..4096, mu in 0.01f64..100.0) {
            let m = m.min(n);
            let got = drift_moment_bound(&DriftBoundParams::state_space_collapse(n, m, mu));
            let want = ssc_bound_for(n, m);
            prop_assert!((got - want).abs() <= 1e-12 * want);
        }

        // (1/(1-rho)) sqrt(m_max/n) = n^(alpha + (gamma-1)/2) / beta, which
        // vanishes iff 2 alpha + gamma < 1.
        #[test]
        fn diminishing_flag_matches_limit(alpha in 0.0f64..0.6, gamma in 0.0f64..1.0) {
            let r = ScalingRegime { alpha, beta: 0.5, gamma_need: gamma };
            let exponent = alpha + (gamma - 1.0) / 2.0;
            let far = |n: f64| n.powf(alpha) / 0.5 * (n.powf(gamma) / n).sqrt();
            let d = classify_regime(&r).diminishing;
            prop_assert_eq!(d, exponent < 0.0);
            if exponent < -0.05 {
                prop_assert!(far(1e12) < far(1e6));
            } else if exponent > 0.05 {
                prop_assert!(far(1e12) > far(1e6));
            }
        }
    }
}
