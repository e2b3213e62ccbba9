use std::path::Path;

use serde_json::Value;

use qkdn_core::config::TopologyConfig;

fn load(rel: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel);
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn reference_config_satisfies_the_schema() {
    let schema = load("configs/topology.schema.json");
    let validator = jsonschema::validator_for(&schema).unwrap();
    let cfg = load("configs/reference.json");
    let errors: Vec<String> = validator.iter_errors(&cfg).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    // a fully expanded config, defaults included, validates too
    let parsed = TopologyConfig::parse(&cfg.to_string()).unwrap();
    let expanded = serde_json::to_value(&parsed).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(&expanded)
        .map(|e| e.to_string())
        .collect();
    assert!(errors.is_empty(), "{errors:?}");
}

#[test]
fn schema_rejects_what_the_parser_rejects() {
    let schema = load("configs/topology.schema.json");
    let validator = jsonschema::validator_for(&schema).unwrap();
    let mut cfg = load("configs/reference.json");
    cfg["links"][0]["initial_state"] = "SIDEWAYS".into();
    assert!(!validator.is_valid(&cfg));
    assert!(TopologyConfig::parse(&cfg.to_string()).is_err());

    let mut cfg = load("configs/reference.json");
    cfg["surprise"] = 1.into();
    assert!(!validator.is_valid(&cfg));
    assert!(TopologyConfig::parse(&cfg.to_string()).is_err());
}
