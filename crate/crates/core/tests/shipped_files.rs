use std::path::PathBuf;

use nilm_core::evaluation::{read_reference_states, REDD_REFERENCE_STATES_W};
use nilm_core::PipelineConfig;

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn default_config_matches_code_defaults() {
    let text = std::fs::read_to_string(repo_file("config/default.toml")).unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), PipelineConfig::default());
}

#[test]
fn default_config_lists_every_key() {
    let text = std::fs::read_to_string(repo_file("config/default.toml")).unwrap();
    let shipped: toml::Table = toml::from_str(&text).unwrap();
    let full: toml::Table = toml::from_str(&PipelineConfig::default().to_toml().unwrap()).unwrap();
    assert_eq!(shipped, full);
}

#[test]
fn reference_states_file() {
    let states = read_reference_states(repo_file("data/redd_reference_states.csv")).unwrap();
    let powers: Vec<f64> = states.iter().map(|(_, p)| *p).collect();
    assert_eq!(powers, REDD_REFERENCE_STATES_W);
}
