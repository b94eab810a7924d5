//! Method dispatch and per-scenario run records.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use aircomp::ao::{alternating_optimize, AoOptions};
use aircomp::baselines::{apt_strategy, fpt_strategy};
use aircomp::metrics::weighted_sum_rate;
use aircomp::model::{initial_scalars, model_forward, ModelParams};
use aircomp::{CVec, NetworkRealization, TransceiverStrategy, C64};
use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::output::{join, split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ao,
    Udgl,
    Fpt,
    Apt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ao, Method::Udgl, Method::Fpt, Method::Apt];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ao => "ao",
            Method::Udgl => "udgl",
            Method::Fpt => "fpt",
            Method::Apt => "apt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .with_context(|| format!("unknown method {s:?} (expected ao, udgl, fpt or apt)"))
    }
}

#[derive(Debug, Clone)]
pub struct Solved {
    pub strategy: TransceiverStrategy,
    /// Outer and inner iteration counts, AO only.
    pub iterations: Option<(usize, usize)>,
}

pub fn solve_with(method: Method, r: &NetworkRealization, model: Option<&ModelParams>) -> Result<Solved> {
    let (strategy, iterations) = match method {
        Method::Ao => {
            let out = alternating_optimize(r, &TransceiverStrategy::full_power(r), &AoOptions::default())?;
            let it = (out.trace.outer_iterations(), out.trace.inner_iterations());
            (out.strategy, Some(it))
        }
        Method::Udgl => {
            let Some(p) = model else {
                bail!("method udgl requires a model (--model)");
            };
            (model_forward(r, p, &initial_scalars(r))?, None)
        }
        Method::Fpt => (fpt_strategy(r)?.strategy, None),
        Method::Apt => (apt_strategy(r)?.strategy, None),
    };
    Ok(Solved { strategy, iterations })
}

/// Outcome of one method on one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub index: usize,
    pub devices: Vec<usize>,
    pub antennas: Vec<usize>,
    pub method: Method,
    pub rates: Vec<f64>,
    pub weighted_sum: f64,
    pub wall_us: f64,
    pub iterations: Option<(usize, usize)>,
    pub strategy: TransceiverStrategy,
}

impl RunRecord {
    pub fn clusters(&self) -> usize {
        self.devices.len()
    }
}

/// Solves `r` and records the result; only the solve call is timed.
pub fn run_one(method: Method, index: usize, r: &NetworkRealization, model: Option<&ModelParams>) -> Result<RunRecord> {
    let t = Instant::now();
    let solved = solve_with(method, r, model)?;
    let wall_us = t.elapsed().as_secs_f64() * 1e6;
    let report = weighted_sum_rate(&solved.strategy, r)?;
    Ok(RunRecord {
        seed: r.seed,
        index,
        devices: r.clusters.iter().map(|c| c.devices).collect(),
        antennas: r.clusters.iter().map(|c| c.antennas).collect(),
        method,
        rates: report.rates,
        weighted_sum: report.weighted_sum,
        wall_us,
        iterations: solved.iterations,
        strategy: solved.strategy,
    })
}

/// Flat CSV form of a [`RunRecord`]. Lists are `;`-joined; `u` and `v` are
/// interleaved `re;im` pairs in cluster order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub index: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: String,
    #[serde(rename = "M")]
    pub m: String,
    pub method: Method,
    pub rates: String,
    #[serde(rename = "R")]
    pub r: f64,
    pub wall_us: f64,
    pub outer_iters: Option<usize>,
    pub inner_iters: Option<usize>,
    pub u: String,
    pub v: String,
}

fn interleave<'a>(zs: impl Iterator<Item = &'a C64>) -> String {
    join(zs.flat_map(|z| [z.re, z.im]))
}

fn complexes(s: &str) -> Result<Vec<C64>> {
    let xs: Vec<f64> = split(s)?;
    ensure!(xs.len() % 2 == 0, "odd number of complex components");
    Ok(xs.chunks(2).map(|p| C64::new(p[0], p[1])).collect())
}

fn chunk<T: Clone>(flat: &[T], sizes: &[usize]) -> Result<Vec<Vec<T>>> {
    ensure!(flat.len() == sizes.iter().sum::<usize>(), "list length does not match cluster sizes");
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        out.push(flat[at..at + s].to_vec());
        at += s;
    }
    Ok(out)
}

impl From<&RunRecord> for RunRow {
    fn from(r: &RunRecord) -> Self {
        RunRow {
            seed: r.seed,
            index: r.index,
            k: r.clusters(),
            n: join(&r.devices),
            m: join(&r.antennas),
            method: r.method,
            rates: join(&r.rates),
            r: r.weighted_sum,
            wall_us: r.wall_us,
            outer_iters: r.iterations.map(|i| i.0),
            inner_iters: r.iterations.map(|i| i.1),
            u: interleave(r.strategy.u.iter().flatten()),
            v: interleave(r.strategy.v.iter().flat_map(|v| v.as_slice())),
        }
    }
}

impl TryFrom<RunRow> for RunRecord {
    type Error = anyhow::Error;

    fn try_from(row: RunRow) -> Result<Self> {
        let devices: Vec<usize> = split(&row.n)?;
        let antennas: Vec<usize> = split(&row.m)?;
        ensure!(devices.len() == row.k && antennas.len() == row.k, "K does not match N and M");
        let u = chunk(&complexes(&row.u)?, &devices)?;
        let v = chunk(&complexes(&row.v)?, &antennas)?.into_iter().map(CVec::new).collect();
        let iterations = match (row.outer_iters, row.inner_iters) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        Ok(RunRecord {
            seed: row.seed,
            index: row.index,
            devices,
            antennas,
            method: row.method,
            rates: split(&row.rates)?,
            weighted_sum: row.r,
            wall_us: row.wall_us,
            iterations,
            strategy: TransceiverStrategy { u, v },
        })
    }
}
