use std::path::Path;

use mmsl::config::ExperimentConfig;

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

#[test]
fn default_config_file_matches_built_in_defaults() {
    assert_eq!(shipped("default.toml"), ExperimentConfig::default());
}

#[test]
fn smoke_config_loads() {
    let c = shipped("smoke.toml");
    assert_eq!(c.train.epochs, 3);
    assert_eq!(c.data.sequences, 4);
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(ExperimentConfig::from_toml("[train]\nalpah = 1.0\n").is_err());
}
