//! Log-barrier interior-point method for small dense conic programs.
//!
//! Minimizes a smooth convex objective subject to strict positivity, disk
//! and second-order-cone constraints over real variables. Each barrier stage
//! minimizes `f0(x) + mu * phi(x)` by damped Newton with Armijo backtracking;
//! `mu` starts at 1 and shrinks by 10x until `nu * mu` (the duality-gap bound,
//! `nu` the total barrier parameter) drops below the requested gap.

use thiserror::Error;

use crate::linalg::real_spd_solve;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("starting point violates constraint {0}")]
    InfeasibleStart(usize),
    #[error("Newton did not converge in stage mu={mu:e} after {iterations} steps (decrement {decrement:e})")]
    IterationLimit { mu: f64, iterations: usize, decrement: f64 },
    #[error("Newton system is singular at mu={mu:e}")]
    Singular { mu: f64 },
}

/// `||A x + c|| <= s . x + s0`, with `A` stored densely.
#[derive(Debug, Clone)]
pub struct SocConstraint {
    rows: usize,
    a: Vec<f64>,
    c: Vec<f64>,
    s: Vec<f64>,
    s0: f64,
    ata: Vec<f64>,
}

impl SocConstraint {
    /// `a` is row-major `rows x n`.
    pub fn new(a: Vec<f64>, c: Vec<f64>, s: Vec<f64>, s0: f64) -> Self {
        let n = s.len();
        let rows = c.len();
        assert_eq!(a.len(), rows * n, "SOC matrix shape");
        let mut ata = vec![0.0; n * n];
        for r in 0..rows {
            let row = &a[r * n..(r + 1) * n];
            for (i, &ai) in row.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                for (j, &aj) in row.iter().enumerate() {
                    ata[i * n + j] += ai * aj;
                }
            }
        }
        SocConstraint { rows, a, c, s, s0, ata }
    }

    fn lhs(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..self.rows)
            .map(|r| {
                self.c[r]
                    + self.a[r * n..(r + 1) * n]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }

    fn rhs(&self, x: &[f64]) -> f64 {
        self.s0 + self.s.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    /// `rhs - ||lhs||`, positive strictly inside the cone.
    pub fn margin(&self, x: &[f64]) -> f64 {
        let z = self.lhs(x);
        self.rhs(x) - z.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub enum Constraint {
    /// `x[index] > 0`
    Positive { index: usize },
    /// `x[i]^2 + x[j]^2 < radius_sq`
    Disk { indices: [usize; 2], radius_sq: f64 },
    SecondOrder(SocConstraint),
}

impl Constraint {
    fn parameter(&self) -> f64 {
        match self {
            Constraint::Positive { .. } | Constraint::Disk { .. } => 1.0,
            Constraint::SecondOrder(_) => 2.0,
        }
    }

    /// Barrier value, or `None` outside the open feasible set.
    fn barrier(&self, x: &[f64]) -> Option<f64> {
        let slack = match self {
            Constraint::Positive { index } => x[*index],
            Constraint::Disk { indices: [i, j], radius_sq } => radius_sq - x[*i] * x[*i] - x[*j] * x[*j],
            Constraint::SecondOrder(soc) => {
                let s = soc.rhs(x);
                let z = soc.lhs(x);
                let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(s > zn) {
                    return None;
                }
                (s - zn) * (s + zn)
            }
        };
        (slack > 0.0).then(|| -slack.ln())
    }

    /// Adds `scale * (grad, hess)` of the barrier at a feasible point.
    fn accumulate(&self, x: &[f64], scale: f64, grad: &mut [f64], hess: &mut [f64]) {
        let n = x.len();
        match self {
            Constraint::Positive { index } => {
                let i = *index;
                grad[i] -= scale / x[i];
                hess[i * n + i] += scale / (x[i] * x[i]);
            }
            Constraint::Disk { indices: [i, j], radius_sq } => {
                let (i, j) = (*i, *j);
                let g = radius_sq - x[i] * x[i] - x[j] * x[j];
                // phi = -ln g, grad g = -2 x, hess g = -2 I
                let gi = -2.0 * x[i];
                let gj = -2.0 * x[j];
                grad[i] -= scale * gi / g;
                grad[j] -= scale * gj / g;
                let g2 = g * g;
                hess[i * n + i] += scale * (gi * gi / g2 + 2.0 / g);
                hess[j * n + j] += scale * (gj * gj / g2 + 2.0 / g);
                hess[i * n + j] += scale * gi * gj / g2;
                hess[j * n + i] += scale * gi * gj / g2;
            }
            Constraint::SecondOrder(soc) => {
                let s = soc.rhs(x);
                let z = soc.lhs(x);
                let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let g = (s - zn) * (s + zn);
                // grad g = 2 s sv - 2 A^T z ; hess g = 2 sv sv^T - 2 A^T A
                let mut dg: Vec<f64> = soc.s.iter().map(|&sv| 2.0 * s * sv).collect();
                for (r, &zr) in z.iter().enumerate() {
                    if zr == 0.0 {
                        continue;
                    }
                    for (d, &a) in dg.iter_mut().zip(&soc.a[r * n..(r + 1) * n]) {
                        *d -= 2.0 * a * zr;
                    }
                }
                let inv_g = 1.0 / g;
                let inv_g2 = inv_g * inv_g;
                for i in 0..n {
                    grad[i] -= scale * dg[i] * inv_g;
                }
                for i in 0..n {
                    for j in 0..n {
                        let h = dg[i] * dg[j] * inv_g2 - (2.0 * soc.s[i] * soc.s[j] - 2.0 * soc.ata[i * n + j]) * inv_g;
                        hess[i * n + j] += scale * h;
                    }
                }
            }
        }
    }
}

/// Smooth convex objective; `value` returns `+inf` outside its domain.
pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;
    /// Adds the gradient and Hessian at `x` into the buffers.
    fn accumulate(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]);
}

/// `-sum c_i ln x[i]`.
#[derive(Debug, Clone)]
pub struct NegLogSum {
    pub terms: Vec<(usize, f64)>,
}

impl Objective for NegLogSum {
    fn value(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for &(i, c) in &self.terms {
            if c == 0.0 {
                continue;
            }
            if !(x[i] > 0.0) {
                return f64::INFINITY;
            }
            acc -= c * x[i].ln();
        }
        acc
    }

    fn accumulate(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) {
        let n = x.len();
        for &(i, c) in &self.terms {
            grad[i] -= c / x[i];
            hess[i * n + i] += c / (x[i] * x[i]);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BarrierOptions {
    pub initial_mu: f64,
    pub mu_factor: f64,
    /// Target bound on `nu * mu`.
    pub gap: f64,
    /// Newton stops when half the squared decrement falls below this.
    pub newton_tol: f64,
    pub max_newton: usize,
    pub armijo_slope: f64,
    pub backtrack: f64,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            initial_mu: 1.0,
            mu_factor: 10.0,
            gap: 1e-8,
            newton_tol: 1e-12,
            max_newton: 200,
            armijo_slope: 0.25,
            backtrack: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub newton_steps: usize,
    pub stages: usize,
}

pub struct BarrierProblem<O> {
    pub objective: O,
    pub constraints: Vec<Constraint>,
}

impl<O: Objective> BarrierProblem<O> {
    fn barrier(&self, x: &[f64]) -> Option<f64> {
        let mut acc = 0.0;
        for c in &self.constraints {
            acc += c.barrier(x)?;
        }
        Some(acc)
    }

    fn merit(&self, x: &[f64], mu: f64) -> f64 {
        match self.barrier(x) {
            Some(b) => self.objective.value(x) + mu * b,
            None => f64::INFINITY,
        }
    }

    pub fn first_violation(&self, x: &[f64]) -> Option<usize> {
        self.constraints.iter().position(|c| c.barrier(x).is_none())
    }

    pub fn solve(&self, x0: &[f64], opts: &BarrierOptions) -> Result<BarrierSolution, BarrierError> {
        if let Some(i) = self.first_violation(x0) {
            return Err(BarrierError::InfeasibleStart(i));
        }
        let n = x0.len();
        let nu: f64 = self.constraints.iter().map(Constraint::parameter).sum();
        let mut x = x0.to_vec();
        let mut mu = opts.initial_mu;
        let mut steps = 0;
        let mut stages = 0;
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        loop {
            stages += 1;
            let mut converged = false;
            let mut decrement = f64::INFINITY;
            for _ in 0..opts.max_newton {
                grad.iter_mut().for_each(|g| *g = 0.0);
                hess.iter_mut().for_each(|h| *h = 0.0);
                self.objective.accumulate(&x, &mut grad, &mut hess);
                for c in &self.constraints {
                    c.accumulate(&x, mu, &mut grad, &mut hess);
                }
                let mut step: Vec<f64> = grad.iter().map(|g| -g).collect();
                let mut factor = hess.clone();
                if real_spd_solve(&mut factor, &mut step, n).is_err() {
                    // retry with a small ridge
                    let ridge = 1e-12 * (0..n).map(|i| hess[i * n + i]).fold(0.0, f64::max);
                    let mut factor = hess.clone();
                    for i in 0..n {
                        factor[i * n + i] += ridge;
                    }
                    step = grad.iter().map(|g| -g).collect();
                    real_spd_solve(&mut factor, &mut step, n).map_err(|_| BarrierError::Singular { mu })?;
                }
                let slope: f64 = grad.iter().zip(&step).map(|(g, d)| g * d).sum();
                decrement = -slope;
                if decrement / 2.0 <= opts.newton_tol {
                    converged = true;
                    break;
                }
                steps += 1;
                let f = self.merit(&x, mu);
                let mut t = 1.0;
                let mut trial = vec![0.0; n];
                let mut accepted = false;
                for _ in 0..80 {
                    for i in 0..n {
                        trial[i] = x[i] + t * step[i];
                    }
                    let ft = self.merit(&trial, mu);
                    if ft <= f + opts.armijo_slope * t * slope {
                        accepted = true;
                        break;
                    }
                    t *= opts.backtrack;
                }
                if !accepted {
                    // no representable progress left at this stage
                    converged = decrement < 1e-6;
                    break;
                }
                std::mem::swap(&mut x, &mut trial);
            }
            if !converged {
                return Err(BarrierError::IterationLimit {
                    mu,
                    iterations: steps,
                    decrement,
                });
            }
            if nu * mu < opts.gap {
                break;
            }
            mu /= opts.mu_factor;
        }
        Ok(BarrierSolution {
            objective: self.objective.value(&x),
            x,
            newton_steps: steps,
            stages,
        })
    }
}
