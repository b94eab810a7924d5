//! Shared fixtures for the benchmarks.

use aircomp::model::{Architecture, ModelParams};
use aircomp::{NetworkRealization, ScenarioConfig};

/// Default-config scenario.
pub fn default_scenario(seed: u64) -> NetworkRealization {
    NetworkRealization::generate(&ScenarioConfig::default(), seed).expect("default config is valid")
}

/// Two clusters of two devices with two antennas each.
pub fn small_scenario(seed: u64) -> NetworkRealization {
    NetworkRealization::generate(&ScenarioConfig::uniform(2, 2, 2), seed).expect("valid config")
}

pub fn default_model() -> ModelParams {
    ModelParams::init(&Architecture::default(), 0)
}

pub fn tiny_model() -> ModelParams {
    ModelParams::init(&Architecture::tiny(), 0)
}
