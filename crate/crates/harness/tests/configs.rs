//! The shipped configuration files parse, validate and hash stably.

use std::path::Path;

use uqcov::models::ClassifierVariant;
use uqcov_harness::config::RegressMethod;
use uqcov_harness::ExperimentConfig;

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn every_shipped_config_loads_and_validates() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let config = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            config.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}

#[test]
fn method_names_round_trip_through_toml() {
    let names: Vec<String> = ClassifierVariant::ALL.iter().map(|v| format!("\"{}\"", v.name())).collect();
    let methods: Vec<String> = RegressMethod::ALL.iter().map(|m| format!("\"{}\"", m.name())).collect();
    let text = format!("[mnist]\nvariants = [{}]\n[regress]\nmethods = [{}]\n", names.join(", "), methods.join(", "));
    let config = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(config.mnist.variants, ClassifierVariant::ALL);
    assert_eq!(config.regress.methods, RegressMethod::ALL);
}

#[test]
fn hash_ignores_output_location_and_threads_only() {
    let base = ExperimentConfig::default();
    let moved = ExperimentConfig {
        out: "elsewhere".into(),
        threads: 3,
        ..base.clone()
    };
    assert_eq!(base.hash(), moved.hash());
    assert_eq!(base.hash().len(), 16);
    let reseeded = ExperimentConfig { seed: 1, ..base.clone() };
    assert_ne!(base.hash(), reseeded.hash());
}

#[test]
fn invalid_values_are_config_errors() {
    for text in [
        "alpha = 1.0",
        "[regress]\nsvi_samples = 1",
        "[regress]\nsplit_fractions = [0.5, 0.5, 0.5]",
        "[regress.search]\nunits = [64, 16]",
        "[mnist]\nvalidation = 0",
    ] {
        let err = ExperimentConfig::from_toml(text).and_then(|c| c.validate()).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{text}");
    }
}
