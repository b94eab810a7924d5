//! Alternating optimization of receive beamformers and transmit scalars.
//!
//! Each outer iteration sets every beamformer to its MMSE closed form for
//! the current transmit scalars, then improves the transmit scalars by
//! successive convex approximation: the rate objective is rewritten with one
//! slack `t_k <= 1/MSE_k` per cluster, `1/t_k` is linearized at an
//! approximation point `t_k°`, and the resulting second-order cone program is
//! solved by the log-barrier method in [`crate::barrier`].

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::barrier::{BarrierError, BarrierOptions, BarrierProblem, Constraint, NegLogSum, SocConstraint};
use crate::linalg::{hermitian_solve, inner, outer_accum_in_place, CMat, CVec, LinalgError, C64};
use crate::metrics::{analytic_mse, log_inverse_mse, weighted_sum_rate, StrategyError, TransceiverStrategy};
use crate::scenario::NetworkRealization;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AoError {
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("subproblem solver failed: {0}")]
    Barrier(#[from] BarrierError),
    #[error("no strictly feasible start for the transmit subproblem (cluster {cluster})")]
    FeasibilityRestoration { cluster: usize },
}

/// Receive beamformer of cluster `k` minimizing its MSE for fixed transmit
/// scalars: `[sum |u|^2 h h^H + s^2 I]^{-1} sum_{n in k} u h`.
pub fn optimal_receive_beamformer(k: usize, u: &[Vec<C64>], r: &NetworkRealization) -> Result<CVec, AoError> {
    let spec = r.cluster(k);
    let m = spec.antennas;
    let mut a = CMat::identity(m);
    for z in 0..m {
        a[(z, z)] = C64::new(spec.noise_power, 0.0);
    }
    let mut b = CVec::zeros(m);
    for (l, us) in u.iter().enumerate() {
        for (n, &un) in us.iter().enumerate() {
            let h = r.channel(l, n, k);
            outer_accum_in_place(h, un.norm_sqr(), &mut a)?;
            if l == k {
                b.axpy(un, h)?;
            }
        }
    }
    Ok(hermitian_solve(&a, &b)?)
}

pub fn optimal_receive_beamformers(u: &[Vec<C64>], r: &NetworkRealization) -> Result<Vec<CVec>, AoError> {
    (0..r.num_clusters())
        .map(|k| optimal_receive_beamformer(k, u, r))
        .collect()
}

/// Below this `|h^H v|` the phase is undefined and reported as degenerate.
pub const DEGENERATE_ALIGNMENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseAlignment {
    /// Unit-modulus factor `e^{j phi}`.
    pub phase: C64,
    pub degenerate: bool,
}

/// Transmit phase making `v^H h u` real and positive: `h^H v / |h^H v|`.
pub fn optimal_phase(v: &CVec, h: &CVec) -> Result<PhaseAlignment, AoError> {
    let q = inner(h, v)?;
    let mag = q.norm();
    if mag < DEGENERATE_ALIGNMENT {
        return Ok(PhaseAlignment {
            phase: C64::new(1.0, 0.0),
            degenerate: true,
        });
    }
    Ok(PhaseAlignment {
        phase: q / mag,
        degenerate: false,
    })
}

/// Slack variables and their approximation points, one per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaState {
    pub t: Vec<f64>,
    pub t_approx: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScaSolution {
    pub u: Vec<Vec<C64>>,
    pub t: Vec<f64>,
    /// `sum_k w_k / (Q_k + log2 N_k) * log2 t_k` at the solution.
    pub objective: f64,
    /// The same objective at the approximation point `(u°, t°)`.
    pub start_objective: f64,
    pub newton_steps: usize,
}

fn rate_coefficients(r: &NetworkRealization) -> Vec<f64> {
    r.clusters.iter().map(|c| c.weight * c.rate_scale()).collect()
}

/// Shrink factors tried, in order, when building a strictly feasible start.
const START_SHRINK: [f64; 3] = [0.999, 1.0 - 1e-6, 0.9];
const START_SLACK: f64 = 0.999;

/// Solves the convexified transmit-scalar problem at approximation point
/// `t_approx` with all beamformers fixed.
///
/// Internally each slack is scaled by its approximation point,
/// `t_k = tau_k * t_k°`, and each cone constraint is multiplied through by
/// `t_k°`; both leave the feasible set unchanged.
pub fn sca_subproblem(
    v: &[CVec],
    u0: &[Vec<C64>],
    t_approx: &[f64],
    r: &NetworkRealization,
    opts: &BarrierOptions,
) -> Result<ScaSolution, AoError> {
    sca_subproblem_weighted(v, u0, t_approx, r, opts, &rate_coefficients(r))
}

/// [`sca_subproblem`] with explicit per-cluster objective coefficients; a
/// zero coefficient keeps the cluster's slack and cone but drops its term.
pub fn sca_subproblem_weighted(
    v: &[CVec],
    u0: &[Vec<C64>],
    t_approx: &[f64],
    r: &NetworkRealization,
    opts: &BarrierOptions,
    coef: &[f64],
) -> Result<ScaSolution, AoError> {
    let k_total = r.num_clusters();
    let d_total = r.num_devices();
    let n = 2 * d_total + k_total;
    let tau = |k: usize| 2 * d_total + k;

    let mut constraints = Vec::with_capacity(d_total + 2 * k_total);
    for id in r.device_ids() {
        let d = r.flat_index(id);
        constraints.push(Constraint::Disk {
            indices: [2 * d, 2 * d + 1],
            radius_sq: r.cluster(id.cluster).max_power,
        });
    }
    for k in 0..k_total {
        constraints.push(Constraint::Positive { index: tau(k) });
    }
    for k in 0..k_total {
        let t0 = t_approx[k];
        let scale = t0.sqrt();
        let noise = r.cluster(k).noise_power * v[k].norm_sqr() * t0;
        let rows = 2 * d_total + 1;
        let mut a = vec![0.0; rows * n];
        let mut c = vec![0.0; rows];
        for id in r.device_ids() {
            let d = r.flat_index(id);
            let g = inner(&v[k], r.channel(id.cluster, id.index, k))? * scale;
            // g * u = (gr ur - gi ui) + j (gi ur + gr ui)
            let (re_row, im_row) = (2 * d, 2 * d + 1);
            a[re_row * n + 2 * d] = g.re;
            a[re_row * n + 2 * d + 1] = -g.im;
            a[im_row * n + 2 * d] = g.im;
            a[im_row * n + 2 * d + 1] = g.re;
            if id.cluster == k {
                c[re_row] = -scale;
            }
        }
        // scaled rhs a' = 2 - tau - noise ; last entry (a' - 1)/2, cone bound (a' + 1)/2
        let last = rows - 1;
        a[last * n + tau(k)] = -0.5;
        c[last] = (1.0 - noise) / 2.0;
        let mut s = vec![0.0; n];
        s[tau(k)] = -0.5;
        constraints.push(Constraint::SecondOrder(SocConstraint::new(a, c, s, (3.0 - noise) / 2.0)));
    }
    let problem = BarrierProblem {
        objective: NegLogSum {
            terms: (0..k_total).map(|k| (tau(k), coef[k] / std::f64::consts::LN_2)).collect(),
        },
        constraints,
    };

    let x0 = feasible_start(&problem, v, u0, t_approx, r)?;
    let sol = problem.solve(&x0, opts)?;

    let mut u = r.clusters.iter().map(|c| Vec::with_capacity(c.devices)).collect::<Vec<Vec<C64>>>();
    for id in r.device_ids() {
        let d = r.flat_index(id);
        u[id.cluster].push(C64::new(sol.x[2 * d], sol.x[2 * d + 1]));
    }
    let mut projected = TransceiverStrategy { u, v: v.to_vec() };
    projected.project_power(r);
    let t: Vec<f64> = (0..k_total).map(|k| sol.x[tau(k)] * t_approx[k]).collect();
    let objective = (0..k_total).map(|k| coef[k] * t[k].log2()).sum();
    let start_objective = (0..k_total).map(|k| coef[k] * t_approx[k].log2()).sum();
    Ok(ScaSolution {
        u: projected.u,
        t,
        objective,
        start_objective,
        newton_steps: sol.newton_steps,
    })
}

fn feasible_start<O: crate::barrier::Objective>(
    problem: &BarrierProblem<O>,
    v: &[CVec],
    u0: &[Vec<C64>],
    t_approx: &[f64],
    r: &NetworkRealization,
) -> Result<Vec<f64>, AoError> {
    let d_total = r.num_devices();
    let k_total = r.num_clusters();
    let mut worst = 0;
    for shrink in START_SHRINK {
        let u: Vec<Vec<C64>> = u0
            .iter()
            .map(|us| us.iter().map(|&z| z * shrink).collect())
            .collect();
        let trial = TransceiverStrategy { u, v: v.to_vec() };
        let mut x = vec![0.0; 2 * d_total + k_total];
        for id in r.device_ids() {
            let d = r.flat_index(id);
            let z = trial.u[id.cluster][id.index];
            x[2 * d] = z.re;
            x[2 * d + 1] = z.im;
        }
        let mut ok = true;
        for k in 0..k_total {
            let mse = analytic_mse(k, &trial, r)?;
            // scaled slack must satisfy tau < 2 - t° * MSE
            let room = 2.0 - t_approx[k] * mse;
            if !(room > 0.0) {
                ok = false;
                worst = k;
                break;
            }
            x[2 * d_total + k] = START_SLACK * room;
        }
        if ok && problem.first_violation(&x).is_none() {
            return Ok(x);
        }
    }
    Err(AoError::FeasibilityRestoration { cluster: worst })
}

#[derive(Debug, Clone, Copy)]
pub struct AoOptions {
    /// Convergence threshold on the weighted-sum rate, both loops.
    pub epsilon: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Anderson-accelerate the outer iteration; a mixed point is kept only
    /// when it beats the plain update on both objectives.
    pub accelerate: bool,
    pub barrier: BarrierOptions,
}

impl Default for AoOptions {
    fn default() -> Self {
        AoOptions {
            epsilon: 1e-4,
            max_outer: 200,
            max_inner: 100,
            accelerate: true,
            barrier: BarrierOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AoStatus {
    Converged,
    /// Outer iteration cap reached; the best iterate is returned.
    IterationCap,
    /// An outer iteration would have lowered the clamped rate and was
    /// rolled back.
    RejectedStep,
    /// The convex subproblem failed; the last good iterate is returned.
    SolverFailure,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AoTrace {
    /// Weighted-sum rate of the initial point, then after every accepted
    /// outer iteration.
    pub outer_rates: Vec<f64>,
    /// Subproblem objectives of each outer iteration's SCA loop.
    pub inner_objectives: Vec<Vec<f64>>,
    pub beamformer_time: Duration,
    pub transmit_time: Duration,
    pub newton_steps: usize,
}

impl AoTrace {
    pub fn outer_iterations(&self) -> usize {
        self.inner_objectives.len()
    }

    pub fn inner_iterations(&self) -> usize {
        self.inner_objectives.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone)]
pub struct AoOutcome {
    pub strategy: TransceiverStrategy,
    pub trace: AoTrace,
    pub status: AoStatus,
}

impl AoOutcome {
    pub fn rate(&self) -> f64 {
        *self.trace.outer_rates.last().unwrap_or(&0.0)
    }
}

/// Full power with uniformly random phases and matching MMSE beamformers.
pub fn random_init(r: &NetworkRealization, seed: u64) -> Result<TransceiverStrategy, AoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<Vec<C64>> = r
        .clusters
        .iter()
        .map(|c| {
            (0..c.devices)
                .map(|_| C64::from_polar(c.max_power.sqrt(), rng.random::<f64>() * std::f64::consts::TAU))
                .collect()
        })
        .collect();
    let v = optimal_receive_beamformers(&u, r)?;
    Ok(TransceiverStrategy { u, v })
}

fn unclamped_objective(s: &TransceiverStrategy, r: &NetworkRealization, coef: &[f64]) -> Result<f64, AoError> {
    let mut acc = 0.0;
    for (k, &c) in coef.iter().enumerate() {
        acc += c * log_inverse_mse(analytic_mse(k, s, r)?);
    }
    Ok(acc)
}

/// A strategy with MMSE beamformers, scored both ways.
struct Scored {
    strategy: TransceiverStrategy,
    objective: f64,
    rate: f64,
}

fn score(u: Vec<Vec<C64>>, r: &NetworkRealization, coef: &[f64]) -> Result<Scored, AoError> {
    let v = optimal_receive_beamformers(&u, r)?;
    let strategy = TransceiverStrategy { u, v };
    Ok(Scored {
        objective: unclamped_objective(&strategy, r, coef)?,
        rate: weighted_sum_rate(&strategy, r)?.weighted_sum,
        strategy,
    })
}

/// Anderson mixing over the outer fixed-point map `u -> T(u)`, on the
/// stacked real and imaginary parts of all transmit scalars.
const ANDERSON_DEPTH: usize = 5;

struct Anderson {
    depth: usize,
    last: Option<(Vec<f64>, Vec<f64>)>,
    dx: VecDeque<Vec<f64>>,
    dg: VecDeque<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Anderson {
            depth,
            last: None,
            dx: VecDeque::new(),
            dg: VecDeque::new(),
        }
    }

    /// Records the pair `(x, T(x))` and proposes the next iterate.
    fn propose(&mut self, x: Vec<f64>, fx: &[f64]) -> Option<Vec<f64>> {
        let g: Vec<f64> = fx.iter().zip(&x).map(|(f, x)| f - x).collect();
        if let Some((px, pg)) = self.last.take() {
            self.dx.push_back(x.iter().zip(&px).map(|(a, b)| a - b).collect());
            self.dg.push_back(g.iter().zip(&pg).map(|(a, b)| a - b).collect());
            if self.dx.len() > self.depth {
                self.dx.pop_front();
                self.dg.pop_front();
            }
        }
        self.last = Some((x, g.clone()));
        let m = self.dg.len();
        if m == 0 {
            return None;
        }
        let mut gram = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            for j in 0..=i {
                let d: f64 = self.dg[i].iter().zip(&self.dg[j]).map(|(a, b)| a * b).sum();
                gram[i * m + j] = d;
                gram[j * m + i] = d;
            }
            rhs[i] = self.dg[i].iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        let ridge = 1e-10 * (0..m).map(|i| gram[i * m + i]).fold(0.0, f64::max);
        for i in 0..m {
            gram[i * m + i] += ridge;
        }
        crate::linalg::real_spd_solve(&mut gram, &mut rhs, m).ok()?;
        let mut next = fx.to_vec();
        for (i, gamma) in rhs.iter().enumerate() {
            for (z, (dx, dg)) in next.iter_mut().zip(self.dx[i].iter().zip(&self.dg[i])) {
                *z -= gamma * (dx + dg);
            }
        }
        next.iter().all(|z| z.is_finite()).then_some(next)
    }
}

fn flatten(u: &[Vec<C64>]) -> Vec<f64> {
    u.iter().flatten().flat_map(|z| [z.re, z.im]).collect()
}

fn unflatten(x: &[f64], like: &[Vec<C64>]) -> Vec<Vec<C64>> {
    let mut it = x.chunks_exact(2).map(|p| C64::new(p[0], p[1]));
    like.iter().map(|us| us.iter().map(|_| it.next().unwrap()).collect()).collect()
}

struct Sweep {
    u: Vec<Vec<C64>>,
    objectives: Vec<f64>,
    failed: bool,
}

/// Inner SCA loop with beamformers fixed, from `t° = 1/MSE`.
fn transmit_loop(
    start: &TransceiverStrategy,
    r: &NetworkRealization,
    coef: &[f64],
    opts: &AoOptions,
    trace: &mut AoTrace,
) -> Result<Sweep, AoError> {
    let mut cur = start.clone();
    let mut t_approx = Vec::with_capacity(r.num_clusters());
    for k in 0..r.num_clusters() {
        t_approx.push(1.0 / analytic_mse(k, &cur, r)?);
    }
    let mut objectives = Vec::new();
    let mut failed = false;
    for _ in 0..opts.max_inner {
        let before = unclamped_objective(&cur, r, coef)?;
        let sol = match sca_subproblem_weighted(&cur.v, &cur.u, &t_approx, r, &opts.barrier, coef) {
            Ok(sol) => sol,
            Err(e) => {
                debug!("subproblem failed: {e}");
                failed = true;
                break;
            }
        };
        trace.newton_steps += sol.newton_steps;
        objectives.push(sol.objective);
        cur.u = sol.u;
        t_approx = sol.t;
        if (before - sol.objective).abs() < opts.epsilon {
            break;
        }
    }
    Ok(Sweep {
        u: cur.u,
        objectives,
        failed,
    })
}

/// Point `anchor + s (anchor - from)` with each scalar pulled back inside
/// its power disk.
fn step_beyond(anchor: &[Vec<C64>], from: &[Vec<C64>], s: f64, r: &NetworkRealization) -> Vec<Vec<C64>> {
    let u = anchor
        .iter()
        .zip(from)
        .enumerate()
        .map(|(l, (a, o))| {
            let cap = r.cluster(l).max_power.sqrt();
            a.iter()
                .zip(o)
                .map(|(&z, &o)| {
                    let w = z + (z - o) * s;
                    let m = w.norm();
                    if m > cap {
                        w * (cap / m)
                    } else {
                        w
                    }
                })
                .collect()
        })
        .collect();
    let mut s = TransceiverStrategy { u, v: Vec::new() };
    s.project_power(r);
    s.u
}

const LINE_SEARCH_DOUBLINGS: usize = 10;

/// Replaces the plain outer update `next` by a better point when one is
/// found: first an Anderson-mixed iterate, then a doubling line search
/// along the one-step and two-step directions. A candidate must raise the
/// unclamped objective without lowering the clamped rate.
fn accelerate(
    next: Scored,
    current: &[Vec<C64>],
    previous: Option<&Vec<Vec<C64>>>,
    mixer: &mut Anderson,
    r: &NetworkRealization,
    coef: &[f64],
) -> Result<Scored, AoError> {
    let better = |c: &Scored, than: &Scored| c.objective > than.objective && c.rate >= than.rate;
    let mut best = next;
    if let Some(x) = mixer.propose(flatten(current), &flatten(&best.strategy.u)) {
        let cand = score(step_beyond(&unflatten(&x, current), current, 0.0, r), r, coef)?;
        if better(&cand, &best) {
            best = cand;
        }
    }
    let anchor = best.strategy.u.clone();
    for from in std::iter::once(current).chain(previous.map(Vec::as_slice)) {
        let mut s = 1.0;
        for _ in 0..LINE_SEARCH_DOUBLINGS {
            let cand = score(step_beyond(&anchor, from, s, r), r, coef)?;
            if !better(&cand, &best) {
                break;
            }
            best = cand;
            s *= 2.0;
        }
    }
    Ok(best)
}

/// Alternates the closed-form beamformer update with the SCA transmit loop
/// until neither the subproblem objective nor the weighted-sum rate moves
/// by `epsilon` over an outer iteration.
///
/// The SCA objective drops the rate clamp, so an outer step can lower the
/// clamped rate; such a step is redone with zero-rate clusters removed from
/// the objective, which makes the remaining terms a lower bound on the
/// clamped rate. A step that still loses rate is rolled back.
pub fn alternating_optimize(
    r: &NetworkRealization,
    init: &TransceiverStrategy,
    opts: &AoOptions,
) -> Result<AoOutcome, AoError> {
    init.check_shape(r)?;
    init.check_power(r)?;
    let coef = rate_coefficients(r);
    let mut best = init.clone();
    let mut rate = weighted_sum_rate(&best, r)?.weighted_sum;
    let mut objective = unclamped_objective(&best, r, &coef)?;
    let mut trace = AoTrace {
        outer_rates: vec![rate],
        ..Default::default()
    };
    let mut status = AoStatus::IterationCap;
    let mut mixer = Anderson::new(ANDERSON_DEPTH);
    let mut previous: Option<Vec<Vec<C64>>> = None;

    for outer in 0..opts.max_outer {
        let clock = Instant::now();
        let v = optimal_receive_beamformers(&best.u, r)?;
        let start = TransceiverStrategy { u: best.u.clone(), v };
        trace.beamformer_time += clock.elapsed();

        let clock = Instant::now();
        let mut sweep = transmit_loop(&start, r, &coef, opts, &mut trace)?;
        let mut next = score(sweep.u.clone(), r, &coef)?;
        if next.rate < rate {
            let mse = weighted_sum_rate(&start, r)?.mse;
            let active: Vec<f64> = coef
                .iter()
                .zip(&mse)
                .map(|(&c, &m)| if m < 1.0 { c } else { 0.0 })
                .collect();
            debug!("outer iteration {outer}: clamped rate fell, retrying with weights {active:?}");
            sweep = transmit_loop(&start, r, &active, opts, &mut trace)?;
            next = score(sweep.u.clone(), r, &coef)?;
        }
        trace.transmit_time += clock.elapsed();
        trace.inner_objectives.push(sweep.objectives);

        if opts.accelerate && !sweep.failed {
            let clock = Instant::now();
            next = accelerate(next, &best.u, previous.as_ref(), &mut mixer, r, &coef)?;
            trace.beamformer_time += clock.elapsed();
        }

        if next.rate < rate {
            status = if sweep.failed {
                AoStatus::SolverFailure
            } else {
                AoStatus::RejectedStep
            };
            break;
        }
        let delta = (next.objective - objective).abs().max(next.rate - rate);
        previous = Some(std::mem::replace(&mut best, next.strategy).u);
        rate = next.rate;
        objective = next.objective;
        trace.outer_rates.push(rate);
        if sweep.failed {
            status = AoStatus::SolverFailure;
            break;
        }
        if delta < opts.epsilon {
            status = AoStatus::Converged;
            break;
        }
    }
    Ok(AoOutcome {
        strategy: best,
        trace,
        status,
    })
}
