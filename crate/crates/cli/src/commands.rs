//! Subcommand implementations. Each returns its rows so callers and tests
//! can inspect them; the binary writes them to CSV.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aircomp::linalg::inner;
use aircomp::model::{save_model, ModelParams};
use aircomp::scenario::{split_seed, PerCluster};
use aircomp::trainer::{train_with, TrainConfig, TrainLog};
use aircomp::{NetworkRealization, ScenarioConfig, TransceiverStrategy};
use anyhow::{bail, ensure, Context, Result};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::write_csv;
use crate::run::{run_one, solve_with, Method, RunRecord, RunRow};

pub const SCENARIO_EXT: &str = "acsn";

/// Master seed of scenario `index` in a batch seeded with `seed`.
pub fn scenario_seed(seed: u64, index: usize) -> u64 {
    split_seed(seed, index as u64)
}

pub fn scenario_file_name(seed: u64, index: usize) -> String {
    format!("scenario-s{seed}-i{index:06}.{SCENARIO_EXT}")
}

fn index_of(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    stem.rsplit_once("-i")?.1.parse().ok()
}

pub fn generate(cfg: &ScenarioConfig, count: usize, seed: u64) -> Result<Vec<NetworkRealization>> {
    (0..count)
        .into_par_iter()
        .map(|i| Ok(NetworkRealization::generate(cfg, scenario_seed(seed, i))?))
        .collect()
}

/// Writes `count` scenario files into `dir` and returns their paths.
pub fn cmd_gen(cfg: &ScenarioConfig, count: usize, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut paths = Vec::with_capacity(count);
    for (i, r) in generate(cfg, count, seed)?.iter().enumerate() {
        let p = dir.join(scenario_file_name(seed, i));
        r.save(&p).with_context(|| format!("writing {}", p.display()))?;
        paths.push(p);
    }
    Ok(paths)
}

/// Loads every scenario file of `dir`, ordered by index.
pub fn load_scenarios(dir: &Path) -> Result<Vec<(usize, NetworkRealization)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().and_then(|e| e.to_str()) != Some(SCENARIO_EXT) {
            continue;
        }
        let idx = index_of(&p).with_context(|| format!("no index in file name {}", p.display()))?;
        let r = NetworkRealization::load(&p).with_context(|| format!("loading {}", p.display()))?;
        out.push((idx, r));
    }
    out.sort_by_key(|(i, r)| (*i, r.seed));
    Ok(out)
}

/// Solves every scenario concurrently; rows come back in input order.
pub fn cmd_solve(
    method: Method,
    scenarios: &[(usize, NetworkRealization)],
    model: Option<&ModelParams>,
) -> Result<Vec<RunRecord>> {
    if method == Method::Udgl && model.is_none() {
        bail!("method udgl requires a model (--model)");
    }
    scenarios.par_iter().map(|(i, r)| run_one(method, *i, r, model)).collect()
}

pub fn write_runs(path: &Path, records: &[RunRecord]) -> Result<()> {
    let rows: Vec<RunRow> = records.iter().map(RunRow::from).collect();
    write_csv(path, "runs", &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Clusters,
    Devices,
    Antennas,
}

impl SweepParam {
    pub fn apply(self, base: &ScenarioConfig, value: usize) -> ScenarioConfig {
        let mut c = base.clone();
        match self {
            SweepParam::Clusters => c.num_clusters = value,
            SweepParam::Devices => c.devices_per_cluster = PerCluster::Uniform(value),
            SweepParam::Antennas => c.antennas = PerCluster::Uniform(value),
        }
        c
    }
}

impl FromStr for SweepParam {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "clusters" => SweepParam::Clusters,
            "devices" => SweepParam::Devices,
            "antennas" => SweepParam::Antennas,
            _ => bail!("unknown sweep parameter {s:?} (expected clusters, devices or antennas)"),
        })
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Clusters => "clusters",
            SweepParam::Devices => "devices",
            SweepParam::Antennas => "antennas",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param_value: usize,
    pub method: Method,
    #[serde(rename = "mean_R")]
    pub mean_r: f64,
    #[serde(rename = "std_R")]
    pub std_r: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// Per-scenario records behind each row, in row order.
    pub records: Vec<Vec<RunRecord>>,
}

/// For each value, draws `count` scenarios with the same seeds as
/// [`cmd_gen`] and applies every method; the model is used zero-shot.
pub fn cmd_sweep(
    base: &ScenarioConfig,
    param: SweepParam,
    values: &[usize],
    methods: &[Method],
    count: usize,
    seed: u64,
    model: Option<&ModelParams>,
) -> Result<SweepOutput> {
    ensure!(count > 0, "sweep needs at least one scenario per value");
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &value in values {
        let cfg = param.apply(base, value);
        cfg.validate().with_context(|| format!("{param} = {value}"))?;
        let scenarios: Vec<_> = generate(&cfg, count, seed)?.into_iter().enumerate().collect();
        for &m in methods {
            info!("sweep {param}={value} method={m}");
            let recs = cmd_solve(m, &scenarios, model)?;
            let rs: Vec<f64> = recs.iter().map(|r| r.weighted_sum).collect();
            let (mean_r, std_r) = mean_std(&rs);
            rows.push(SweepRow { param_value: value, method: m, mean_r, std_r, n: rs.len() });
            records.push(recs);
        }
    }
    Ok(SweepOutput { rows, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub n: usize,
    pub mean_us: f64,
    pub std_us: f64,
    #[serde(rename = "mean_R")]
    pub mean_r: f64,
    /// Mean outer iterations (AO only).
    pub mean_outer_iters: Option<f64>,
}

/// Runtime comparison on `count` scenarios, one method at a time.
pub fn cmd_bench(
    cfg: &ScenarioConfig,
    methods: &[Method],
    count: usize,
    seed: u64,
    model: Option<&ModelParams>,
) -> Result<Vec<BenchRow>> {
    ensure!(count > 0, "bench needs at least one scenario");
    let scenarios: Vec<_> = generate(cfg, count, seed)?.into_iter().enumerate().collect();
    methods
        .iter()
        .map(|&m| {
            // sequential so timings do not compete for cores
            let recs = scenarios.iter().map(|(i, r)| run_one(m, *i, r, model)).collect::<Result<Vec<_>>>()?;
            let us: Vec<f64> = recs.iter().map(|r| r.wall_us).collect();
            let (mean_us, std_us) = mean_std(&us);
            let iters: Vec<f64> = recs.iter().filter_map(|r| r.iterations.map(|i| i.0 as f64)).collect();
            Ok(BenchRow {
                method: m,
                n: recs.len(),
                mean_us,
                std_us,
                mean_r: mean_std(&recs.iter().map(|r| r.weighted_sum).collect::<Vec<_>>()).0,
                mean_outer_iters: (!iters.is_empty()).then(|| mean_std(&iters).0),
            })
        })
        .collect()
}

/// Per-cluster transmit power and received power matrix of a strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `sum_n |u_n|^2` per cluster.
    pub power: Vec<f64>,
    /// `matrix[k][l] = sum_{n in l} |v_k^H h_{n,k} u_n|^2`: signal power when
    /// `k == l`, interference from cluster `l` at center `k` otherwise.
    pub matrix: Vec<Vec<f64>>,
}

pub fn heatmap(s: &TransceiverStrategy, r: &NetworkRealization) -> Result<Heatmap> {
    s.check_shape(r)?;
    let k_n = r.num_clusters();
    let power = s.u.iter().map(|us| us.iter().map(|z| z.norm_sqr()).sum()).collect();
    let mut matrix = vec![vec![0.0; k_n]; k_n];
    for (k, row) in matrix.iter_mut().enumerate() {
        for (l, us) in s.u.iter().enumerate() {
            for (n, u) in us.iter().enumerate() {
                row[l] += (inner(&s.v[k], r.channel(l, n, k))? * u).norm_sqr();
            }
        }
    }
    Ok(Heatmap { power, matrix })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub method: Method,
    /// `power` (row = col = cluster) or `received` (row = center, col = source cluster).
    pub kind: String,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

pub fn cmd_demo_heatmap(r: &NetworkRealization, methods: &[Method], model: Option<&ModelParams>) -> Result<Vec<HeatmapRow>> {
    let mut rows = Vec::new();
    for &m in methods {
        let h = heatmap(&solve_with(m, r, model)?.strategy, r)?;
        for (k, &p) in h.power.iter().enumerate() {
            rows.push(HeatmapRow { method: m, kind: "power".into(), row: k, col: k, value: p });
        }
        for (k, line) in h.matrix.iter().enumerate() {
            for (l, &x) in line.iter().enumerate() {
                rows.push(HeatmapRow { method: m, kind: "received".into(), row: k, col: l, value: x });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct LogRow {
    epoch: usize,
    stage: u8,
    lr: f64,
    mean_loss: f64,
    #[serde(rename = "mean_R")]
    mean_r: f64,
}

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let rows: Vec<LogRow> = log
        .records
        .iter()
        .map(|r| LogRow { epoch: r.epoch, stage: r.stage, lr: r.lr, mean_loss: r.mean_loss, mean_r: r.mean_r })
        .collect();
    write_csv(path, "train", &rows)
}

/// Trains (optionally warm-started), saves the model to `out` and the log
/// next to it as `<out>.train.csv`.
pub fn cmd_train(cfg: &TrainConfig, init: Option<ModelParams>, out: &Path) -> Result<(ModelParams, TrainLog)> {
    let (params, log) = train_with(cfg, init, |r, _| {
        info!("epoch {} stage {} lr {:e} loss {:.5} R {:.5}", r.epoch, r.stage, r.lr, r.mean_loss, r.mean_r)
    })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_model(out, &params)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".train.csv");
    write_train_log(Path::new(&log_path), &log)?;
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names_carry_index() {
        let n = scenario_file_name(42, 17);
        assert_eq!(index_of(Path::new(&n)), Some(17));
        assert!(n.contains("s42"));
    }

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_param_apply() {
        let b = ScenarioConfig::default();
        assert_eq!(SweepParam::Clusters.apply(&b, 3).num_clusters, 3);
        assert_eq!("antennas".parse::<SweepParam>().unwrap(), SweepParam::Antennas);
        assert!("power".parse::<SweepParam>().is_err());
    }
}
