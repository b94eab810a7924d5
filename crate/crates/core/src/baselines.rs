//! Non-learning baselines: full-power (FPT) and adaptive-power (APT)
//! transmission.
//!
//! Both alternate a closed-form transmit rule with the MMSE beamformers
//! until the weighted sum rate changes by less than [`BASELINE_TOL`]. The
//! returned pair `(u, v)` always has `u` computed from `v`, so the transmit
//! rule holds exactly for the reported strategy.

use log::warn;

use crate::ao::{optimal_receive_beamformers, AoError, DEGENERATE_ALIGNMENT};
use crate::linalg::{inner, CVec, C64};
use crate::metrics::{weighted_sum_rate, TransceiverStrategy};
use crate::scenario::NetworkRealization;

pub const BASELINE_TOL: f64 = 1e-6;
pub const BASELINE_MAX_ROUNDS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub strategy: TransceiverStrategy,
    pub rate: f64,
    pub rounds: usize,
    /// Weighted sum rate after each round.
    pub trace: Vec<f64>,
}

fn own_gains(v: &[CVec], r: &NetworkRealization) -> Result<Vec<Vec<C64>>, AoError> {
    (0..r.num_clusters())
        .map(|l| {
            (0..r.cluster(l).devices)
                .map(|n| Ok(inner(r.channel(l, n, l), &v[l])?))
                .collect()
        })
        .collect()
}

/// Full power with phases aligned to `v`; a degenerate alignment keeps the
/// previous phase.
pub fn fpt_scalars(v: &[CVec], prev: &[Vec<C64>], r: &NetworkRealization) -> Result<Vec<Vec<C64>>, AoError> {
    let q = own_gains(v, r)?;
    Ok(q.iter()
        .zip(prev)
        .enumerate()
        .map(|(l, (ql, pl))| {
            let a = r.cluster(l).max_power.sqrt();
            ql.iter()
                .zip(pl)
                .map(|(&g, &old)| {
                    let m = g.norm();
                    if m < DEGENERATE_ALIGNMENT {
                        C64::from_polar(a, old.arg())
                    } else {
                        g / m * a
                    }
                })
                .collect()
        })
        .collect())
}

/// `sqrt(P) * min_m |q_m| * q_n / |q_n|^2` with `q = h^H v`, equalizing the
/// received amplitude of every device at the weakest device's full-power
/// level. Devices with a vanishing effective channel are silenced.
pub fn apt_scalars(v: &[CVec], r: &NetworkRealization) -> Result<Vec<Vec<C64>>, AoError> {
    let q = own_gains(v, r)?;
    Ok(q.iter()
        .enumerate()
        .map(|(l, ql)| {
            let a = r.cluster(l).max_power.sqrt();
            let floor = ql
                .iter()
                .map(|g| g.norm())
                .filter(|&m| m >= DEGENERATE_ALIGNMENT)
                .fold(f64::INFINITY, f64::min);
            ql.iter()
                .enumerate()
                .map(|(n, &g)| {
                    let m = g.norm();
                    if m < DEGENERATE_ALIGNMENT {
                        warn!("device {n} of cluster {l} has no effective channel; power set to 0");
                        C64::new(0.0, 0.0)
                    } else if m == floor {
                        // exact full power for the weakest device
                        g / m * a
                    } else {
                        g / m * (a * floor / m)
                    }
                })
                .collect()
        })
        .collect())
}

fn alternate(
    r: &NetworkRealization,
    rule: impl Fn(&[CVec], &[Vec<C64>]) -> Result<Vec<Vec<C64>>, AoError>,
) -> Result<BaselineOutcome, AoError> {
    let mut u = TransceiverStrategy::full_power(r).u;
    let mut trace = Vec::new();
    let mut best: Option<(TransceiverStrategy, f64)> = None;
    let mut prev_rate = f64::NEG_INFINITY;
    for _ in 0..BASELINE_MAX_ROUNDS {
        let v = optimal_receive_beamformers(&u, r)?;
        u = rule(&v, &u)?;
        let s = TransceiverStrategy { u: u.clone(), v };
        let rate = weighted_sum_rate(&s, r)?.weighted_sum;
        trace.push(rate);
        if best.as_ref().is_none_or(|(_, b)| rate > *b) {
            best = Some((s, rate));
        }
        if (rate - prev_rate).abs() < BASELINE_TOL {
            break;
        }
        prev_rate = rate;
    }
    let (strategy, rate) = best.expect("at least one round");
    Ok(BaselineOutcome { strategy, rate, rounds: trace.len(), trace })
}

/// Every device at full power, phases aligned to the MMSE beamformers.
pub fn fpt_strategy(r: &NetworkRealization) -> Result<BaselineOutcome, AoError> {
    alternate(r, |v, prev| fpt_scalars(v, prev, r))
}

/// Channel-inversion power control equalizing received amplitudes per cluster.
pub fn apt_strategy(r: &NetworkRealization) -> Result<BaselineOutcome, AoError> {
    alternate(r, |v, _| apt_scalars(v, r))
}
