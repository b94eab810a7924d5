//! Per-cluster MSE, AirComp rate and the weighted-sum objective.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{inner, CVec, C64};
use crate::scenario::NetworkRealization;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("strategy shape does not match realization: {0}")]
    Shape(String),
    #[error("device {device} of cluster {cluster} transmits {power:e} W above its limit {max:e} W")]
    Power {
        cluster: usize,
        device: usize,
        power: f64,
        max: f64,
    },
}

/// Slack allowed on `|u|^2 <= P` when validating a strategy.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// Transmit scalars `u[l][n]` for every device and receive beamformers
/// `v[k]` for every fusion center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransceiverStrategy {
    pub u: Vec<Vec<C64>>,
    pub v: Vec<CVec>,
}

impl TransceiverStrategy {
    /// Every device at full power with zero phase; beamformers zero.
    pub fn full_power(r: &NetworkRealization) -> Self {
        let u = r
            .clusters
            .iter()
            .map(|c| vec![C64::new(c.max_power.sqrt(), 0.0); c.devices])
            .collect();
        let v = r.clusters.iter().map(|c| CVec::zeros(c.antennas)).collect();
        TransceiverStrategy { u, v }
    }

    pub fn check_shape(&self, r: &NetworkRealization) -> Result<(), StrategyError> {
        if self.u.len() != r.num_clusters() || self.v.len() != r.num_clusters() {
            return Err(StrategyError::Shape(format!(
                "{} transmit groups and {} beamformers for {} clusters",
                self.u.len(),
                self.v.len(),
                r.num_clusters()
            )));
        }
        for (k, c) in r.clusters.iter().enumerate() {
            if self.u[k].len() != c.devices {
                return Err(StrategyError::Shape(format!(
                    "cluster {k}: {} scalars for {} devices",
                    self.u[k].len(),
                    c.devices
                )));
            }
            if self.v[k].len() != c.antennas {
                return Err(StrategyError::Shape(format!(
                    "cluster {k}: beamformer length {} for {} antennas",
                    self.v[k].len(),
                    c.antennas
                )));
            }
        }
        Ok(())
    }

    pub fn check_power(&self, r: &NetworkRealization) -> Result<(), StrategyError> {
        for (l, us) in self.u.iter().enumerate() {
            let max = r.clusters[l].max_power;
            for (n, u) in us.iter().enumerate() {
                let power = u.norm_sqr();
                if !(power <= max + POWER_TOLERANCE) {
                    return Err(StrategyError::Power {
                        cluster: l,
                        device: n,
                        power,
                        max,
                    });
                }
            }
        }
        Ok(())
    }

    /// Pulls any scalar exceeding its power limit back onto the boundary.
    pub fn project_power(&mut self, r: &NetworkRealization) {
        for (l, us) in self.u.iter_mut().enumerate() {
            let max = r.clusters[l].max_power;
            for u in us.iter_mut() {
                let p = u.norm_sqr();
                if p > max {
                    *u *= (max / p).sqrt();
                    while u.norm_sqr() > max {
                        *u *= 1.0 - 1e-15;
                    }
                }
            }
        }
    }

    /// Transmit scalars flattened in global device order.
    pub fn flat_u(&self) -> Vec<C64> {
        self.u.iter().flatten().copied().collect()
    }

    pub fn moduli(&self) -> Vec<Vec<f64>> {
        self.u.iter().map(|us| us.iter().map(|u| u.norm()).collect()).collect()
    }
}

/// Per-cluster MSE, rates, and their weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub mse: Vec<f64>,
    pub rates: Vec<f64>,
    pub weighted_sum: f64,
}

/// `v_k^H h_{n_l,k} u_{n_l}` for every device `(l, n)`, in global order.
pub fn effective_gains(
    k: usize,
    s: &TransceiverStrategy,
    r: &NetworkRealization,
) -> Result<Vec<(usize, C64)>, StrategyError> {
    s.check_shape(r)?;
    let v = &s.v[k];
    let mut out = Vec::with_capacity(r.num_devices());
    for (l, us) in s.u.iter().enumerate() {
        for (n, &u) in us.iter().enumerate() {
            let g = inner(v, r.channel(l, n, k)).map_err(|e| StrategyError::Shape(e.to_string()))?;
            out.push((l, g * u));
        }
    }
    Ok(out)
}

/// MSE of cluster `k` in per-term form: intra-cluster misalignment, plus
/// inter-cluster interference, plus noise.
pub fn analytic_mse(k: usize, s: &TransceiverStrategy, r: &NetworkRealization) -> Result<f64, StrategyError> {
    let noise = r.cluster(k).noise_power * s.v[k].norm_sqr();
    let terms: f64 = effective_gains(k, s, r)?
        .into_iter()
        .map(|(l, g)| if l == k { (g - 1.0).norm_sqr() } else { g.norm_sqr() })
        .sum();
    Ok(terms + noise)
}

/// MSE of cluster `k` via the quadratic form
/// `v^H [sum |u|^2 h h^H + s^2 I] v - 2 Re(v^H sum u h) + N_k`.
pub fn analytic_mse_expanded(
    k: usize,
    s: &TransceiverStrategy,
    r: &NetworkRealization,
) -> Result<f64, StrategyError> {
    s.check_shape(r)?;
    let v = &s.v[k];
    let mut quad = r.cluster(k).noise_power * v.norm_sqr();
    let mut cross = C64::new(0.0, 0.0);
    for (l, us) in s.u.iter().enumerate() {
        for (n, &u) in us.iter().enumerate() {
            let vh = inner(v, r.channel(l, n, k)).map_err(|e| StrategyError::Shape(e.to_string()))?;
            quad += u.norm_sqr() * vh.norm_sqr();
            if l == k {
                cross += vh * u;
            }
        }
    }
    Ok(quad - 2.0 * cross.re + r.cluster(k).devices as f64)
}

/// Monte-Carlo estimate of `E|s_k - v_k^H y_k|^2` with unit complex Gaussian
/// symbols and receiver noise drawn per sample.
pub fn empirical_mse(
    k: usize,
    s: &TransceiverStrategy,
    r: &NetworkRealization,
    num_samples: usize,
    seed: u64,
) -> Result<f64, StrategyError> {
    let gains = effective_gains(k, s, r)?;
    let v = &s.v[k];
    let sigma = (r.cluster(k).noise_power / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cn = |rng: &mut ChaCha8Rng, scale: f64| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re, im) * scale
    };
    let mut acc = 0.0;
    for _ in 0..num_samples.max(1) {
        let mut err = C64::new(0.0, 0.0);
        for &(l, g) in &gains {
            let x = cn(&mut rng, std::f64::consts::FRAC_1_SQRT_2);
            if l == k {
                err += x;
            }
            err -= g * x;
        }
        for vi in v.as_slice() {
            err -= vi.conj() * cn(&mut rng, sigma);
        }
        acc += err.norm_sqr();
    }
    Ok(acc / num_samples.max(1) as f64)
}

/// `log2(1/mse)` without the positive-part clamp.
pub fn log_inverse_mse(mse: f64) -> f64 {
    -mse.log2()
}

/// Computed function values per channel use,
/// `max(0, log2(1/mse)) / (Q + log2 N)`.
///
/// `mse == 0` cannot occur with positive noise; it is floored at the
/// smallest positive double, which caps the rate.
pub fn aircomp_rate(mse: f64, quant_bits: u32, devices: usize) -> f64 {
    let mse = if mse > 0.0 {
        mse
    } else {
        warn!("zero MSE reported; capping AirComp rate");
        f64::MIN_POSITIVE
    };
    let denom = quant_bits as f64 + (devices as f64).log2();
    log_inverse_mse(mse).max(0.0) / denom
}

pub fn weighted_sum_rate(s: &TransceiverStrategy, r: &NetworkRealization) -> Result<RateReport, StrategyError> {
    let mut mse = Vec::with_capacity(r.num_clusters());
    let mut rates = Vec::with_capacity(r.num_clusters());
    let mut total = 0.0;
    for (k, c) in r.clusters.iter().enumerate() {
        let m = analytic_mse(k, s, r)?;
        let rate = aircomp_rate(m, c.quant_bits, c.devices);
        total += c.weight * rate;
        mse.push(m);
        rates.push(rate);
    }
    Ok(RateReport {
        mse,
        rates,
        weighted_sum: total,
    })
}
