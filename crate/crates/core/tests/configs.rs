use std::path::Path;

use msjq::config::{load_config, parse_config, serialize_config, ConfigDocument};
use msjq::experiments::{standard_set, SetId};

fn fixture(name: &str) -> ConfigDocument {
    load_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)).unwrap()
}

#[test]
fn shipped_set_documents_match_builtin_sets() {
    for set in [SetId::I, SetId::II, SetId::III] {
        for (label, mut spec) in standard_set(set, false) {
            spec.sim.seed = 1;
            assert_eq!(fixture(&format!("{label}.toml")), ConfigDocument::Sweep(spec), "{label}");
        }
    }
}

#[test]
fn set_i_document_regenerates_table_loads() {
    let ConfigDocument::Sweep(spec) = fixture("set-i.toml") else { panic!("expected sweep") };
    let loads: Vec<String> = spec
        .n_values
        .iter()
        .map(|&n| format!("{:.4}", spec.config_at(n).unwrap().load().total))
        .collect();
    assert_eq!(loads, ["0.8351", "0.8564", "0.8750", "0.8912"]);
    let cfg = spec.config_at(1024).unwrap();
    assert_eq!(cfg.needs(), &[3, 10, 32]);
}

#[test]
fn single_class_document_validates() {
    let ConfigDocument::Cluster(doc) = fixture("single-class.toml") else { panic!("expected cluster") };
    let cfg = doc.cluster().validate().unwrap();
    assert_eq!(cfg.num_servers(), 4);
    assert_eq!(cfg.needs(), &[2]);
    assert!((cfg.load().total - 0.5).abs() < 1e-15);
}

#[test]
fn shipped_documents_round_trip() {
    for name in ["fixture-n3.toml", "single-class.toml", "set-i-n65536.toml", "set-ii.toml"] {
        let doc = fixture(name);
        assert_eq!(parse_config(&serialize_config(&doc)).unwrap(), doc, "{name}");
    }
}
