use std::path::PathBuf;

use aircomp::model::load_model;
use aircomp::NetworkRealization;
use aircomp_cli::commands::write_runs;
use aircomp_cli::*;
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aircomp", version, about = "Multi-cluster AirComp transceiver design harness")]
struct Cli {
    /// Flat TOML config; AIRCOMP_<KEY> environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write scenario files.
    Gen {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method on every scenario file of a directory.
    Solve {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `gen`.
        scenarios: PathBuf,
    },
    /// Train the unfolded model.
    Train {
        /// Warm-start from this model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean rate per method over a range of cluster, device or antenna counts.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "ao,fpt,apt")]
        method: Vec<Method>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall-clock comparison of methods.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "ao,fpt,apt")]
        method: Vec<Method>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transmit power and received power matrix of one scenario.
    DemoHeatmap {
        #[arg(long, value_delimiter = ',', default_value = "ao,fpt,apt")]
        method: Vec<Method>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        scenario: PathBuf,
    },
}

fn model_arg(p: &Option<PathBuf>) -> Result<Option<aircomp::model::ModelParams>> {
    p.as_ref()
        .map(|p| load_model(p).with_context(|| format!("loading model {}", p.display())))
        .transpose()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Gen { count, seed, out } => {
            let paths = cmd_gen(&cfg.scenario, count, seed, &out)?;
            log::info!("wrote {} scenarios to {}", paths.len(), out.display());
        }
        Cmd::Solve { method, model, out, scenarios } => {
            let model = model_arg(&model)?;
            let set = load_scenarios(&scenarios)?;
            let recs = cmd_solve(method, &set, model.as_ref())?;
            write_runs(&out, &recs)?;
        }
        Cmd::Train { model, seed, out } => {
            let mut train = cfg.train;
            if let Some(s) = seed {
                train.seed = s;
            }
            let init = model_arg(&model)?;
            let (_, log) = cmd_train(&train, init, &out)?;
            if let Some(last) = log.records.last() {
                log::info!("final mean R {:.5}", last.mean_r);
            }
        }
        Cmd::Sweep { param, values, method, model, count, seed, out } => {
            let model = model_arg(&model)?;
            let res = cmd_sweep(&cfg.scenario, param, &values, &method, count, seed, model.as_ref())?;
            write_csv(&out, "sweep", &res.rows)?;
        }
        Cmd::Bench { method, model, count, seed, out } => {
            let model = model_arg(&model)?;
            let rows = cmd_bench(&cfg.scenario, &method, count, seed, model.as_ref())?;
            write_csv(&out, "bench", &rows)?;
        }
        Cmd::DemoHeatmap { method, model, out, scenario } => {
            let model = model_arg(&model)?;
            let r = NetworkRealization::load(&scenario).with_context(|| format!("loading {}", scenario.display()))?;
            let rows = cmd_demo_heatmap(&r, &method, model.as_ref())?;
            write_csv(&out, "heatmap", &rows)?;
        }
    }
    Ok(())
}
