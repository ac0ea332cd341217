//! TOML configuration documents.
//!
//! A document holds exactly one of two tables:
//!
//! ```toml
//! [cluster]
//! num_servers = 4
//! seed = 7            # optional
//!
//! [[cluster.classes]]
//! class_id = 1
//! server_need = 2
//! service_rate = 1.0
//! arrival_rate = 1.0
//! ```
//!
//! or a `[sweep]` table mirroring [`SweepSpec`]:
//!
//! ```toml
//! [sweep]
//! n_values = [64, 256, 1024, 4096]
//! needs = [3, "log2(n)", "sqrt(n)"]
//! service_rates = [0.25, 0.5, 1.0]
//! split = "equal-loads"         # or { weights = [..] }
//! replications = 1
//!
//! [sweep.load]                  # or { rho = 0.5 }
//! alpha = 0.1
//! beta = 0.25
//! gamma_need = 0.5
//!
//! [sweep.sim]
//! seed = 1
//! arrivals = 1000000
//! warmup_fraction = 0.2
//! segments = 10
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiments::SweepSpec;
use crate::model::{ClusterConfig, JobClassSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigParseError {
    #[error("{0}")]
    Syntax(String),
    #[error("document must contain exactly one of [cluster] or [sweep]")]
    WrongShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDocument {
    pub num_servers: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub classes: Vec<JobClassSpec>,
}

impl ClusterDocument {
    pub fn cluster(&self) -> ClusterConfig {
        ClusterConfig::new(self.num_servers, self.classes.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigDocument {
    Cluster(ClusterDocument),
    Sweep(SweepSpec),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster: Option<ClusterDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepSpec>,
}

pub fn parse_config(text: &str) -> Result<ConfigDocument, ConfigParseError> {
    let raw: Raw = toml::from_str(text).map_err(|e| ConfigParseError::Syntax(e.to_string().trim_end().to_string()))?;
    match (raw.cluster, raw.sweep) {
        (Some(c), None) => Ok(ConfigDocument::Cluster(c)),
        (None, Some(s)) => Ok(ConfigDocument::Sweep(s)),
        _ => Err(ConfigParseError::WrongShape),
    }
}

pub fn serialize_config(doc: &ConfigDocument) -> String {
    let raw = match doc {
        ConfigDocument::Cluster(c) => Raw {
            cluster: Some(c.clone()),
            sweep: None,
        },
        ConfigDocument::Sweep(s) => Raw {
            cluster: None,
            sweep: Some(s.clone()),
        },
    };
    toml::to_string(&raw).expect("config documents serialize")
}

#[derive(Debug, Error)]
pub enum LoadConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: ConfigParseError },
}

pub fn load_config(path: &Path) -> Result<ConfigDocument, LoadConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text).map_err(|source| LoadConfigError::Parse {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::ScalingRegime;
    use crate::experiments::{
        scaling_sweep, standard_set, FixedLoad, LoadRule, NeedProfile, SetId, SplitRule, SweepSim,
    };
    use proptest::prelude::*;

    const MINIMAL: &str = r#"
[cluster]
num_servers = 4

[[cluster.classes]]
class_id = 1
server_need = 2
service_rate = 1.0
arrival_rate = 1.0
"#;

    const SET_I: &str = r#"
[sweep]
n_values = [64, 256, 1024, 4096, 16384, 65536]
needs = [3, "log2(n)", "sqrt(n)"]
service_rates = [0.25, 0.5, 1.0]

[sweep.load]
alpha = 0.1
beta = 0.25
gamma_need = 0.5
"#;

    #[test]
    fn minimal_cluster_document() {
        let ConfigDocument::Cluster(doc) = parse_config(MINIMAL).unwrap() else {
            panic!("expected a cluster document");
        };
        let cfg = doc.cluster().validate().unwrap();
        assert_eq!(cfg.num_servers(), 4);
        assert_eq!(cfg.load().total, 0.5);
        assert_eq!(doc.seed, None);
    }

    #[test]
    fn set_one_document_regenerates_load_table() {
        let ConfigDocument::Sweep(spec) = parse_config(SET_I).unwrap() else {
            panic!("expected a sweep document");
        };
        assert_eq!(spec, standard_set(SetId::I, true)[0].1);
        let loads: Vec<f64> = scaling_sweep(&spec).unwrap().iter().map(|c| c.load().total).collect();
        let want = [0.8351, 0.8564, 0.8750, 0.8912, 0.9053, 0.9175];
        for (l, w) in loads.iter().zip(want) {
            assert!((l - w).abs() < 5e-5);
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = parse_config(&MINIMAL.replace("service_rate", "service_rte")).unwrap_err();
        let ConfigParseError::Syntax(msg) = err else { panic!() };
        assert!(msg.contains("service_rte"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
        assert!(parse_config(&format!("{SET_I}\nbogus = 1\n")).is_err());
        assert!(parse_config("[other]\nx = 1\n").is_err());
    }

    #[test]
    fn needs_exactly_one_table() {
        assert_eq!(parse_config(""), Err(ConfigParseError::WrongShape));
        assert_eq!(parse_config(&format!("{MINIMAL}{SET_I}")), Err(ConfigParseError::WrongShape));
    }

    #[test]
    fn bad_need_profile_is_a_parse_error() {
        assert!(parse_config(&SET_I.replace("sqrt(n)", "n^3")).is_err());
    }

    #[test]
    fn fixed_load_and_weights() {
        let text = r#"
[sweep]
n_values = [8]
needs = [1, 2]
service_rates = [1.0, 1.0]
split = { weights = [1.0, 3.0] }
load = { rho = 0.4 }
"#;
        let ConfigDocument::Sweep(spec) = parse_config(text).unwrap() else { panic!() };
        assert_eq!(spec.load, LoadRule::Fixed(FixedLoad { rho: 0.4 }));
        assert_eq!(spec.split, SplitRule::Weights(vec![1.0, 3.0]));
        assert_eq!(spec.sim, SweepSim::default());
    }

    fn need_strategy() -> impl Strategy<Value = NeedProfile> {
        prop_oneof![
            (1u32..64).prop_map(NeedProfile::Constant),
            Just(NeedProfile::Log2),
            Just(NeedProfile::Sqrt),
            (1u32..40).prop_map(|c| NeedProfile::QuarterRoot(f64::from(c) / 4.0)),
            (0u32..5).prop_map(NeedProfile::Log2Plus),
        ]
    }

    proptest! {
        #[test]
        fn sweep_round_trip(
            n_values in prop::collection::btree_set(1u32..100_000, 1..6),
            needs in prop::collection::vec(need_strategy(), 1..4),
            rates in prop::collection::vec(0.01f64..10.0, 4),
            regime in (0.0f64..1.0, 0.01f64..1.0, 0.0f64..1.0),
            fixed in prop::option::of(0.0f64..1.0),
            weights in prop::option::of(prop::collection::vec(0.0f64..5.0, 4)),
            seed in any::<u64>(),
            arrivals in 1u64..10_000_000,
            reps in 1u32..5,
        ) {
            let k = needs.len();
            let spec = SweepSpec {
                n_values: n_values.into_iter().collect(),
                load: match fixed {
                    Some(rho) => LoadRule::Fixed(FixedLoad { rho }),
                    None => LoadRule::Regime(ScalingRegime { alpha: regime.0, beta: regime.1, gamma_need: regime.2 }),
                },
                service_rates: rates[..k].to_vec(),
                needs,
                split: weights.map_or(SplitRule::EqualLoads, |w| SplitRule::Weights(w[..k].to_vec())),
                sim: SweepSim { seed, arrivals, warmup_fraction: 0.25, segments: 10 },
                replications: reps,
            };
            let doc = ConfigDocument::Sweep(spec);
            prop_assert_eq!(parse_config(&serialize_config(&doc)).unwrap(), doc);
        }

        #[test]
        fn cluster_round_trip(
            n in 1u32..1000,
            classes in prop::collection::vec((1u32..50, 0.01f64..10.0, 0.0f64..10.0), 1..5),
            seed in prop::option::of(any::<u64>()),
        ) {
            let cluster = ClusterConfig::from_triples(n, &classes);
            let doc = ConfigDocument::Cluster(ClusterDocument {
                num_servers: n,
                seed,
                classes: cluster.classes,
            });
            prop_assert_eq!(parse_config(&serialize_config(&doc)).unwrap(), doc);
        }
    }
}
