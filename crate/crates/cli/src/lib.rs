//! Harness behind the `aircomp` binary: scenario batches, method runs,
//! sweeps, runtime benchmarks and training, all emitting versioned CSV.

pub mod commands;
pub mod config;
pub mod output;
pub mod run;

pub use commands::{
    cmd_bench, cmd_demo_heatmap, cmd_gen, cmd_solve, cmd_sweep, cmd_train, heatmap, load_scenarios, BenchRow, Heatmap,
    HeatmapRow, SweepParam, SweepRow,
};
pub use config::{load_config, parse_config, RunConfig};
pub use output::{csv_header, read_csv, write_csv, CSV_VERSION};
pub use run::{run_one, Method, RunRecord, RunRow};
