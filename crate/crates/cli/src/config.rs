//! Flat key/value run configuration.
//!
//! One TOML table holds every [`ScenarioConfig`] field and every scalar
//! [`TrainConfig`] field under its own name, plus the architecture keys
//! `blocks`, `layers`, `hidden`, `decoder` and the forward switches
//! `attach_coefficients`, `detach_closed_form`. Environment variables
//! `AIRCOMP_<KEY>` override file values; their values are parsed as TOML
//! (`AIRCOMP_ANTENNAS=[4,8]`) and fall back to plain strings.

use std::path::Path;

use aircomp::model::{Architecture, ForwardOptions};
use aircomp::trainer::{Optimizer, TrainConfig};
use aircomp::ScenarioConfig;
use anyhow::{Context, Result};
use serde::Deserialize;
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "AIRCOMP_";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    /// Training settings; `train.scenario` equals `scenario`.
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig { scenario: train.scenario.clone(), train }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainKeys {
    epochs: usize,
    batch_size: usize,
    dataset_size: usize,
    holdout_size: usize,
    lr0: f64,
    decay: f64,
    decay_interval: usize,
    stage1_fraction: f64,
    seed: u64,
    optimizer: Optimizer,
    blocks: usize,
    layers: usize,
    hidden: usize,
    decoder: Vec<usize>,
    attach_coefficients: bool,
    detach_closed_form: bool,
}

impl Default for TrainKeys {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainKeys {
            epochs: t.epochs,
            batch_size: t.batch_size,
            dataset_size: t.dataset_size,
            holdout_size: t.holdout_size,
            lr0: t.lr0,
            decay: t.decay,
            decay_interval: t.decay_interval,
            stage1_fraction: t.stage1_fraction,
            seed: t.seed,
            optimizer: t.optimizer,
            blocks: t.arch.blocks,
            layers: t.arch.layers,
            hidden: t.arch.hidden,
            decoder: t.arch.decoder,
            attach_coefficients: t.forward.attach_coefficients,
            detach_closed_form: t.forward.detach_closed_form,
        }
    }
}

fn scenario_keys() -> Vec<String> {
    Table::try_from(ScenarioConfig::default())
        .expect("scenario config serializes to a table")
        .keys()
        .cloned()
        .collect()
}

fn env_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Builds a config from file text and `(name, value)` environment pairs.
/// Pairs whose name lacks the prefix are ignored.
pub fn parse_config<I>(text: &str, env: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: Table = text.parse().context("config is not valid TOML")?;
    for (name, raw) in env {
        if let Some(key) = name.strip_prefix(ENV_PREFIX) {
            table.insert(key.to_ascii_lowercase(), env_value(&raw));
        }
    }
    let sk = scenario_keys();
    let (scen, rest): (Table, Table) = table.into_iter().partition(|(k, _)| sk.contains(k));
    let scenario: ScenarioConfig = Value::Table(scen).try_into().context("invalid scenario keys")?;
    let keys: TrainKeys = Value::Table(rest).try_into().context("invalid training keys")?;
    scenario.validate()?;
    let train = TrainConfig {
        epochs: keys.epochs,
        batch_size: keys.batch_size,
        dataset_size: keys.dataset_size,
        holdout_size: keys.holdout_size,
        lr0: keys.lr0,
        decay: keys.decay,
        decay_interval: keys.decay_interval,
        stage1_fraction: keys.stage1_fraction,
        seed: keys.seed,
        optimizer: keys.optimizer,
        scenario: scenario.clone(),
        arch: Architecture { blocks: keys.blocks, layers: keys.layers, hidden: keys.hidden, decoder: keys.decoder },
        forward: ForwardOptions {
            attach_coefficients: keys.attach_coefficients,
            detach_closed_form: keys.detach_closed_form,
        },
    };
    train.validate()?;
    Ok(RunConfig { scenario, train })
}

/// Reads `path` (defaults if `None`) and applies the process environment.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    parse_config(&text, std::env::vars())
}
