//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. `ACCEPTANCE_ONLY=3,6` restricts the run to some criteria.

use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use aircomp::ao::{
    alternating_optimize, optimal_phase, optimal_receive_beamformer, optimal_receive_beamformers, sca_subproblem,
    AoOptions, AoStatus,
};
use aircomp::autodiff::{Tape, Var};
use aircomp::baselines::{apt_strategy, fpt_strategy};
use aircomp::barrier::BarrierOptions;
use aircomp::metrics::{analytic_mse, empirical_mse, weighted_sum_rate, RateReport};
use aircomp::model::{
    initial_scalars, model_forward, rate_gradient, rate_value, Architecture, ForwardOptions, ModelParams, RateObjective,
};
use aircomp::scenario::PerCluster;
use aircomp::trainer::{evaluate, holdout_seed, train, Optimizer, TrainConfig};
use aircomp::{CVec, NetworkRealization, ScenarioConfig, TransceiverStrategy, C64};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

static RATES_SEEN: AtomicUsize = AtomicUsize::new(0);
static RATES_NEGATIVE: AtomicUsize = AtomicUsize::new(0);
static CLAMPED_SEEN: AtomicUsize = AtomicUsize::new(0);

fn track(rep: &RateReport) -> &RateReport {
    RATES_SEEN.fetch_add(rep.rates.len(), Ordering::Relaxed);
    let neg = rep.rates.iter().filter(|&&x| !(x >= 0.0)).count();
    RATES_NEGATIVE.fetch_add(neg, Ordering::Relaxed);
    CLAMPED_SEEN.fetch_add(rep.mse.iter().filter(|&&m| m >= 1.0).count(), Ordering::Relaxed);
    rep
}

fn rate_of(s: &TransceiverStrategy, r: &NetworkRealization) -> f64 {
    track(&weighted_sum_rate(s, r).unwrap()).weighted_sum
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn cn(rng: &mut ChaCha8Rng) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn desk_config(rng: &mut ChaCha8Rng) -> ScenarioConfig {
    let k = rng.random_range(1..=3);
    ScenarioConfig {
        num_clusters: k,
        devices_per_cluster: PerCluster::List((0..k).map(|_| rng.random_range(1..=4)).collect()),
        antennas: PerCluster::List((0..k).map(|_| rng.random_range(1..=4)).collect()),
        ..ScenarioConfig::default()
    }
}

fn random_u(r: &NetworkRealization, rng: &mut ChaCha8Rng) -> Vec<Vec<C64>> {
    (0..r.num_clusters())
        .map(|l| {
            let a = r.cluster(l).max_power.sqrt();
            (0..r.cluster(l).devices)
                .map(|_| C64::from_polar(a * rng.random_range(0.05..1.0), rng.random_range(0.0..std::f64::consts::TAU)))
                .collect()
        })
        .collect()
}

fn with_v(s: &TransceiverStrategy, k: usize, v: CVec) -> TransceiverStrategy {
    let mut t = s.clone();
    t.v[k] = v;
    t
}

fn c1_mse_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..50 {
        let cfg = desk_config(&mut rng);
        let r = NetworkRealization::generate(&cfg, 1000 + i).unwrap();
        let u = random_u(&r, &mut rng);
        let v: Vec<CVec> = optimal_receive_beamformers(&u, &r)
            .unwrap()
            .into_iter()
            .map(|v| v.as_slice().iter().map(|&x| x * (C64::new(1.0, 0.0) + cn(&mut rng) * 0.5)).collect())
            .collect();
        let s = TransceiverStrategy { u, v };
        for k in 0..r.num_clusters() {
            let a = analytic_mse(k, &s, &r).unwrap();
            let e = empirical_mse(k, &s, &r, 1_000_000, 7 + i * 10 + k as u64).unwrap();
            worst = worst.max((a - e).abs() / a);
            checked += 1;
        }
    }
    outcome(worst <= 0.01, format!("{checked} clusters, worst relative gap {worst:.2e} (limit 1e-2)"))
}

fn c2_beamformer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_grad: f64 = 0.0;
    let mut beaten = 0;
    for i in 0..50 {
        let cfg = desk_config(&mut rng);
        let r = NetworkRealization::generate(&cfg, 2000 + i).unwrap();
        let u = random_u(&r, &mut rng);
        let v = optimal_receive_beamformers(&u, &r).unwrap();
        let s = TransceiverStrategy { u: u.clone(), v };
        for k in 0..r.num_clusters() {
            let vk = optimal_receive_beamformer(k, &u, &r).unwrap();
            let f = |v: CVec| analytic_mse(k, &with_v(&s, k, v), &r).unwrap();
            let f0 = f(vk.clone());
            let h = 1e-4 * vk.norm();
            let mut g2 = 0.0;
            for j in 0..vk.len() {
                for dir in [C64::new(h, 0.0), C64::new(0.0, h)] {
                    let mut p = vk.clone();
                    p[j] += dir;
                    let mut m = vk.clone();
                    m[j] -= dir;
                    let d = (f(p) - f(m)) / (2.0 * h);
                    g2 += d * d;
                }
            }
            worst_grad = worst_grad.max(g2.sqrt() * vk.norm() / f0);
            for _ in 0..100 {
                let scale = vk.norm() * 10f64.powf(rng.random_range(-4.0..0.0));
                let d: CVec = (0..vk.len()).map(|_| cn(&mut rng)).collect();
                let d = d.scale(C64::new(scale / d.norm(), 0.0));
                let mut p = vk.clone();
                p.axpy(C64::new(1.0, 0.0), &d).unwrap();
                if f(p) < f0 * (1.0 - 1e-14) {
                    beaten += 1;
                }
            }
        }
    }
    outcome(
        worst_grad <= 1e-6 && beaten == 0,
        format!("worst relative gradient {worst_grad:.2e} (limit 1e-6), perturbations beating the beamformer: {beaten}"),
    )
}

fn c3_phase() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut devices = 0;
    for i in 0..50 {
        let cfg = desk_config(&mut rng);
        let r = NetworkRealization::generate(&cfg, 3000 + i).unwrap();
        let u = random_u(&r, &mut rng);
        let v = optimal_receive_beamformers(&u, &r).unwrap();
        let s = TransceiverStrategy { u, v };
        for l in 0..r.num_clusters() {
            for n in 0..r.cluster(l).devices {
                let ph = optimal_phase(&s.v[l], r.channel(l, n, l)).unwrap();
                let modulus = s.u[l][n].norm();
                let mse_at = |z: C64| {
                    let mut t = s.clone();
                    t.u[l][n] = z;
                    analytic_mse(l, &t, &r).unwrap()
                };
                let best = mse_at(ph.phase * modulus);
                let grid = (0..1024)
                    .map(|g| mse_at(C64::from_polar(modulus, std::f64::consts::TAU * g as f64 / 1024.0)))
                    .fold(f64::INFINITY, f64::min);
                worst = worst.max(best - grid);
                devices += 1;
            }
        }
    }
    outcome(worst <= 1e-9, format!("{devices} devices, largest grid improvement {worst:.2e} (limit 1e-9)"))
}

fn sca_objective(v: &[CVec], u: &[Vec<C64>], r: &NetworkRealization) -> f64 {
    let s = TransceiverStrategy { u: u.to_vec(), v: v.to_vec() };
    (0..r.num_clusters())
        .map(|k| r.cluster(k).weight * r.cluster(k).rate_scale() * -analytic_mse(k, &s, r).unwrap().log2())
        .sum()
}

/// Converged SCA objective and the best 51-point-per-device modulus grid
/// value for one K = 1 instance with beamformer `v` fixed.
fn sca_vs_grid(r: &NetworkRealization, u0: Vec<Vec<C64>>, v: &[CVec]) -> (f64, f64) {
    let opts = BarrierOptions::default();
    let n = r.cluster(0).devices;
    let s0 = TransceiverStrategy { u: u0.clone(), v: v.to_vec() };
    let mut u = u0;
    let mut t = vec![1.0 / analytic_mse(0, &s0, r).unwrap()];
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..500 {
        let sol = sca_subproblem(v, &u, &t, r, &opts).unwrap();
        u = sol.u;
        t = sol.t;
        if (sol.objective - prev).abs() < 1e-10 {
            break;
        }
        prev = sol.objective;
    }
    let sca = sca_objective(v, &u, r);
    let a = r.cluster(0).max_power.sqrt();
    let phases: Vec<C64> = (0..n).map(|d| optimal_phase(&v[0], r.channel(0, d, 0)).unwrap().phase).collect();
    let points = 51usize;
    let mut grid = f64::NEG_INFINITY;
    for code in 0..points.pow(n as u32) {
        let mut c = code;
        let us: Vec<C64> = (0..n)
            .map(|d| {
                let m = a * (c % points) as f64 / (points - 1) as f64;
                c /= points;
                phases[d] * m
            })
            .collect();
        grid = grid.max(sca_objective(v, &[us], r));
    }
    (sca, grid)
}

fn c4_sca_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // instances as AO meets them: beamformer from the full-power start
    let mut worst: f64 = 0.0;
    // random feasible starts: the grid cannot beat SCA, though SCA may
    // beat the grid between its points
    let mut worst_loss: f64 = f64::NEG_INFINITY;
    let mut worst_gain: f64 = 0.0;
    for n in [1usize, 2] {
        for i in 0..25u64 {
            let cfg = ScenarioConfig::uniform(1, n, 2);
            let r = NetworkRealization::generate(&cfg, 4000 + 100 * n as u64 + i).unwrap();
            let full = TransceiverStrategy::full_power(&r);
            let (sca, grid) = sca_vs_grid(&r, full.u.clone(), &full.v);
            worst = worst.max((sca - grid).abs());
            let u0 = random_u(&r, &mut rng);
            let v = optimal_receive_beamformers(&u0, &r).unwrap();
            let (sca, grid) = sca_vs_grid(&r, u0, &v);
            worst_loss = worst_loss.max(grid - sca);
            worst_gain = worst_gain.max(sca - grid);
        }
    }
    outcome(
        worst <= 1e-3 && worst_loss <= 1e-3,
        format!(
            "50 AO-start instances: worst |sca - grid| {worst:.2e} (limit 1e-3); 50 random starts: grid ahead of sca by at most {worst_loss:.2e}, sca ahead by up to {worst_gain:.2e}"
        ),
    )
}

struct AoStats {
    times: Vec<f64>,
    scenarios: Vec<NetworkRealization>,
}

fn c5_ao(stats: &mut AoStats) -> Outcome {
    let cfg = ScenarioConfig::default();
    let opts = AoOptions::default();
    let mut violations = 0;
    let mut converged = 0;
    let mut capped = 0;
    let mut other = 0;
    let mut worst_drop: f64 = 0.0;
    for seed in 0..200u64 {
        let r = NetworkRealization::generate(&cfg, seed).unwrap();
        let init = TransceiverStrategy::full_power(&r);
        let t = Instant::now();
        let out = alternating_optimize(&r, &init, &opts).unwrap();
        stats.times.push(t.elapsed().as_secs_f64());
        let trace = &out.trace.outer_rates;
        for w in trace.windows(2) {
            worst_drop = worst_drop.max(w[0] - w[1]);
            if w[1] < w[0] - 1e-9 {
                violations += 1;
            }
        }
        assert!((rate_of(&out.strategy, &r) - out.rate()).abs() <= 1e-9);
        match out.status {
            AoStatus::Converged => converged += 1,
            AoStatus::IterationCap => capped += 1,
            _ => other += 1,
        }
        stats.scenarios.push(r);
    }
    let frac = converged as f64 / 200.0;
    outcome(
        violations == 0 && frac >= 0.95,
        format!(
            "converged {converged}/200 ({:.1}%, need >= 95%), cap {capped}, other stops {other}, trace drops > 1e-9: {violations} (largest {worst_drop:.1e})",
            100.0 * frac
        ),
    )
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn reduce(t: &mut Tape, x: Var, seed: u64) -> Var {
    let (r, c) = t.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let p = t.mul(x, w).unwrap();
    t.sum(p)
}

fn eval_build(build: &Build, shapes: &[(usize, usize)], inputs: &[Vec<f64>]) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = shapes.iter().zip(inputs).map(|(&(r, c), x)| t.param(r, c, x.clone()).unwrap()).collect();
    let out = build(&mut t, &vars);
    t.scalar(out)
}

/// Largest `|ad - fd|_inf / max(|fd|_inf, 1e-8)` over the inputs.
fn grad_error(build: &Build, shapes: &[(usize, usize)], inputs: &[Vec<f64>]) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = shapes.iter().zip(inputs).map(|(&(r, c), x)| t.param(r, c, x.clone()).unwrap()).collect();
    let out = build(&mut t, &vars);
    let g = t.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (vi, var) in vars.iter().enumerate() {
        let ad = g.get_or_zeros(*var, inputs[vi].len());
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 1e-8;
        for e in 0..inputs[vi].len() {
            let x0 = inputs[vi][e];
            let h = 1e-6 * x0.abs().max(1.0);
            let mut p = inputs.to_vec();
            p[vi][e] = x0 + h;
            let mut m = inputs.to_vec();
            m[vi][e] = x0 - h;
            let fd = (eval_build(build, shapes, &p) - eval_build(build, shapes, &m)) / (2.0 * h);
            diff = diff.max((ad[e] - fd).abs());
            scale = scale.max(fd.abs());
        }
        worst = worst.max(diff / scale);
    }
    worst
}

fn hermitian_from(t: &mut Tape, b: Var, m: usize) -> Var {
    let bc = t.complex_conj(b).unwrap();
    let rows: Vec<Var> = (0..m)
        .map(|j| {
            let c = t.slice_cols(bc, 2 * j, 2).unwrap();
            t.reshape(c, 1, 2 * m).unwrap()
        })
        .collect();
    let bh = t.concat_rows(&rows).unwrap();
    let prod = t.complex_matmul(b, bh).unwrap();
    let mut eye = vec![0.0; 2 * m * m];
    for i in 0..m {
        eye[2 * (i * m + i)] = 1.0;
    }
    let eye = t.constant(m, 2 * m, eye).unwrap();
    t.add(prod, eye).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

fn c6_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut cases: Vec<(&str, Vec<(usize, usize)>, Box<Build>)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($s:expr),*], $f:expr) => {
            cases.push(($name, vec![$($s),*], Box::new($f)))
        };
    }
    case!("add", [(2, 3), (2, 3)], |t, v| { let y = t.add(v[0], v[1]).unwrap(); reduce(t, y, 1) });
    case!("sub", [(2, 3), (2, 3)], |t, v| { let y = t.sub(v[0], v[1]).unwrap(); reduce(t, y, 2) });
    case!("mul", [(2, 3), (2, 3)], |t, v| { let y = t.mul(v[0], v[1]).unwrap(); reduce(t, y, 3) });
    case!("scale", [(2, 3)], |t, v| { let y = t.scale(v[0], -1.7); reduce(t, y, 4) });
    case!("offset", [(2, 3)], |t, v| { let y = t.offset(v[0], 0.3); let y = t.mul(y, y).unwrap(); reduce(t, y, 5) });
    case!("mul_scalar", [(2, 3), (1, 1)], |t, v| { let y = t.mul_scalar(v[0], v[1]).unwrap(); reduce(t, y, 6) });
    case!("add_row", [(3, 2), (1, 2)], |t, v| { let y = t.add_row(v[0], v[1]).unwrap(); let y = t.mul(y, y).unwrap(); reduce(t, y, 7) });
    case!("matmul", [(2, 3), (3, 4)], |t, v| { let y = t.matmul(v[0], v[1]).unwrap(); reduce(t, y, 8) });
    case!("matvec", [(3, 2), (2, 1)], |t, v| { let y = t.matvec(v[0], v[1]).unwrap(); reduce(t, y, 9) });
    case!("sum", [(2, 3)], |t, v| { let y = t.mul(v[0], v[0]).unwrap(); t.sum(y) });
    case!("sum_rows", [(3, 2)], |t, v| { let y = t.sum_rows(v[0]); let y = t.mul(y, y).unwrap(); reduce(t, y, 10) });
    case!("concat_cols", [(2, 1), (2, 3)], |t, v| { let y = t.concat_cols(&[v[0], v[1]]).unwrap(); let y = t.mul(y, y).unwrap(); reduce(t, y, 11) });
    case!("concat_rows", [(1, 2), (3, 2)], |t, v| { let y = t.concat_rows(&[v[0], v[1]]).unwrap(); let y = t.mul(y, y).unwrap(); reduce(t, y, 12) });
    case!("gather_rows", [(3, 2)], |t, v| { let y = t.gather_rows(v[0], &[2, 0, 2, 1]).unwrap(); let y = t.mul(y, y).unwrap(); reduce(t, y, 13) });
    case!("slice_rows", [(4, 2)], |t, v| { let y = t.slice_rows(v[0], 1, 2).unwrap(); let y = t.mul(y, y).unwrap(); reduce(t, y, 14) });
    case!("slice_cols", [(2, 4)], |t, v| { let y = t.slice_cols(v[0], 1, 2).unwrap(); let y = t.mul(y, y).unwrap(); reduce(t, y, 15) });
    case!("reshape", [(2, 3)], |t, v| { let y = t.reshape(v[0], 3, 2).unwrap(); let y = t.mul(y, y).unwrap(); reduce(t, y, 16) });
    case!("transpose", [(2, 3)], |t, v| { let y = t.transpose(v[0]); let y = t.mul(y, y).unwrap(); reduce(t, y, 17) });
    case!("ln", [(2, 3)], |t, v| { let y = t.mul(v[0], v[0]).unwrap(); let y = t.offset(y, 0.5); let y = t.ln(y); reduce(t, y, 18) });
    case!("log2", [(2, 3)], |t, v| { let y = t.mul(v[0], v[0]).unwrap(); let y = t.offset(y, 0.5); let y = t.log2(y); reduce(t, y, 19) });
    case!("sqrt", [(2, 3)], |t, v| { let y = t.mul(v[0], v[0]).unwrap(); let y = t.offset(y, 0.5); let y = t.sqrt(y); reduce(t, y, 20) });
    case!("tanh", [(2, 3)], |t, v| { let y = t.tanh(v[0]); reduce(t, y, 21) });
    case!("selu", [(2, 3)], |t, v| { let y = t.selu(v[0]); reduce(t, y, 22) });
    case!("sigmoid", [(2, 3)], |t, v| { let y = t.sigmoid(v[0]); reduce(t, y, 23) });
    case!("pos_part", [(2, 3)], |t, v| { let y = t.pos_part(v[0]); reduce(t, y, 24) });
    case!("layer_norm", [(3, 4), (1, 4), (1, 4)], |t, v| { let y = t.layer_norm(v[0], v[1], v[2]).unwrap(); reduce(t, y, 25) });
    case!("magnitude", [(2, 4)], |t, v| { let y = t.magnitude(v[0]).unwrap(); reduce(t, y, 26) });
    case!("norm_sq", [(2, 4)], |t, v| { let y = t.norm_sq(v[0]).unwrap(); reduce(t, y, 27) });
    case!("complex_mul", [(2, 4), (2, 4)], |t, v| { let y = t.complex_mul(v[0], v[1]).unwrap(); reduce(t, y, 28) });
    case!("complex_conj", [(2, 4)], |t, v| { let y = t.complex_conj(v[0]).unwrap(); let y = t.mul(y, v[0]).unwrap(); reduce(t, y, 29) });
    case!("phase_normalize", [(2, 4)], |t, v| { let y = t.phase_normalize(v[0]).unwrap(); reduce(t, y, 30) });
    case!("scale_complex", [(2, 4), (2, 2)], |t, v| { let y = t.scale_complex(v[0], v[1]).unwrap(); reduce(t, y, 31) });
    case!("complex_matmul", [(2, 6), (3, 4)], |t, v| { let y = t.complex_matmul(v[0], v[1]).unwrap(); reduce(t, y, 32) });
    case!("hermitian_solve", [(3, 6), (3, 2)], |t, v| { let a = hermitian_from(t, v[0], 3); let y = t.hermitian_solve(a, v[1]).unwrap(); reduce(t, y, 33) });

    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, shapes, build) in &cases {
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|&(r, c)| {
                // keep pos_part away from its kink
                let mut x = rand_vec(&mut rng, r * c, -2.0, 2.0);
                x.iter_mut().for_each(|v| if v.abs() < 0.1 { *v += 0.2 });
                x
            })
            .collect();
        let e = grad_error(build.as_ref(), shapes, &inputs);
        worst = worst.max(e);
        if !(e <= 1e-4) {
            failures.push(format!("{name} {e:.1e}"));
        }
    }

    // full tiny model, every parameter, coefficients attached so the
    // tape gradient is the true derivative of the forward map
    let r = NetworkRealization::generate(&ScenarioConfig::uniform(2, 2, 2), 66).unwrap();
    let arch = Architecture::tiny();
    let params = ModelParams::init(&arch, 6);
    let u0 = initial_scalars(&r);
    let opts = ForwardOptions::fully_attached();
    let g = rate_gradient(&r, &params, &u0, RateObjective::Unclamped, opts).unwrap();
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 1e-8;
    let mut p = params.clone();
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        for e in 0..params.tensors()[ti].data.len() {
            let x0 = params.tensors()[ti].data[e];
            let h = 1e-6 * x0.abs().max(1.0);
            p.tensors_mut()[ti].data[e] = x0 + h;
            let fp = rate_value(&r, &p, &u0, RateObjective::Unclamped, opts).unwrap();
            p.tensors_mut()[ti].data[e] = x0 - h;
            let fm = rate_value(&r, &p, &u0, RateObjective::Unclamped, opts).unwrap();
            p.tensors_mut()[ti].data[e] = x0;
            let fd = (fp - fm) / (2.0 * h);
            diff = diff.max((g.grads[ti][e] - fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    let model_err = diff / scale;
    if !(model_err <= 1e-4) {
        failures.push(format!("tiny model {model_err:.1e}"));
    }
    outcome(
        failures.is_empty(),
        format!(
            "{} primitives worst {worst:.1e}, tiny model ({} parameters) {model_err:.1e} (limit 1e-4){}",
            cases.len(),
            params.num_scalars(),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

fn c7_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let params = ModelParams::init(&Architecture::default(), 7);
    let mut worst_u: f64 = 0.0;
    let mut worst_v: f64 = 0.0;
    let mut worst_r: f64 = 0.0;
    for i in 0..20u64 {
        let k = rng.random_range(2..=4);
        let cfg = ScenarioConfig {
            num_clusters: k,
            devices_per_cluster: PerCluster::List((0..k).map(|_| rng.random_range(1..=4)).collect()),
            antennas: PerCluster::List((0..k).map(|_| rng.random_range(1..=4)).collect()),
            ..ScenarioConfig::default()
        };
        let r = NetworkRealization::generate(&cfg, 7000 + i).unwrap();
        let base = model_forward(&r, &params, &initial_scalars(&r)).unwrap();
        let rate = rate_of(&base, &r);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let pr = r.permute_clusters(&perm);
            let out = model_forward(&pr, &params, &initial_scalars(&pr)).unwrap();
            // cluster j of the permuted network is cluster perm[j] of the original
            for (j, &src) in perm.iter().enumerate() {
                for (a, b) in out.u[j].iter().zip(&base.u[src]) {
                    worst_u = worst_u.max((a - b).norm());
                }
                let scale = base.v[src].norm().max(1e-300);
                for (a, b) in out.v[j].as_slice().iter().zip(base.v[src].as_slice()) {
                    worst_v = worst_v.max((a - b).norm() / scale);
                }
            }
            worst_r = worst_r.max((rate_of(&out, &pr) - rate).abs());
        }
    }
    outcome(
        worst_u <= 1e-9 && worst_v <= 1e-9 && worst_r <= 1e-9,
        format!("100 permutations: max |du| {worst_u:.1e}, max relative |dv| {worst_v:.1e}, max |dR| {worst_r:.1e} (limit 1e-9)"),
    )
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 300,
        batch_size: 32,
        dataset_size: 2000,
        holdout_size: 200,
        lr0: 3e-3,
        seed: 1,
        optimizer: Optimizer::Adam,
        scenario: ScenarioConfig::uniform(2, 2, 2),
        arch: Architecture::tiny(),
        ..TrainConfig::default()
    }
}

fn holdout(cfg: &ScenarioConfig, master: u64, n: usize) -> Vec<NetworkRealization> {
    (0..n).map(|i| NetworkRealization::generate(cfg, holdout_seed(master, i)).unwrap()).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn udgl_mean(p: &ModelParams, set: &[NetworkRealization]) -> f64 {
    let summary = evaluate(p, set).unwrap();
    for r in set {
        rate_of(&model_forward(r, p, &initial_scalars(r)).unwrap(), r);
    }
    summary.mean_rate
}

fn c8_training(trained: &mut Option<ModelParams>) -> Outcome {
    let cfg = tiny_train_config();
    let set = holdout(&cfg.scenario, cfg.seed, 200);
    let untrained = ModelParams::init(&cfg.arch, aircomp::scenario::split_seed(cfg.seed, u64::MAX));
    let before = udgl_mean(&untrained, &set);
    let t = Instant::now();
    let (p, _) = train(&cfg, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let after = udgl_mean(&p, &set);
    let opts = AoOptions::default();
    let ao = mean(set.iter().map(|r| {
        let out = alternating_optimize(r, &TransceiverStrategy::full_power(r), &opts).unwrap();
        rate_of(&out.strategy, r)
    }));
    let fpt = mean(set.iter().map(|r| rate_of(&fpt_strategy(r).unwrap().strategy, r)));
    let apt = mean(set.iter().map(|r| rate_of(&apt_strategy(r).unwrap().strategy, r)));
    *trained = Some(p);
    let ratio = after / ao;
    outcome(
        ratio >= 0.9 && after > fpt && after > apt,
        format!(
            "UDGL {after:.4} (untrained {before:.4}) = {:.1}% of AO {ao:.4} (need >= 90%), FPT {fpt:.4}, APT {apt:.4}; trained in {secs:.0} s",
            100.0 * ratio
        ),
    )
}

fn c9_speed(stats: &AoStats) -> Outcome {
    let params = ModelParams::init(&Architecture::default(), 9);
    let n = stats.scenarios.len().min(100);
    if n == 0 {
        return outcome(false, "no AO timings (criterion 5 skipped)".into());
    }
    let mut times = Vec::with_capacity(n);
    for r in &stats.scenarios[..n] {
        let u0 = initial_scalars(r);
        let t = Instant::now();
        let s = model_forward(r, &params, &u0).unwrap();
        times.push(t.elapsed().as_secs_f64());
        rate_of(&s, r);
    }
    let udgl = mean(times.into_iter());
    let ao = mean(stats.times[..n].iter().copied());
    outcome(
        udgl <= 0.1 * ao,
        format!("{n} default scenarios: UDGL {:.2} ms vs AO {:.1} ms ({:.2}%, limit 10%)", udgl * 1e3, ao * 1e3, 100.0 * udgl / ao),
    )
}

fn c10_fine_tune(trained: &Option<ModelParams>) -> Outcome {
    let base = match trained {
        Some(p) => p.clone(),
        None => train(&tiny_train_config(), None).unwrap().0,
    };
    let base_cfg = tiny_train_config();
    let shifted = base_cfg.scenario.scaled_area(0.75);
    let set = holdout(&shifted, 10, 200);
    let applied = udgl_mean(&base, &set);
    let cfg = TrainConfig { scenario: shifted, epochs: 100, lr0: 1e-3, seed: 2, ..base_cfg };
    let (tuned, _) = train(&cfg, Some(base)).unwrap();
    let transferred = udgl_mean(&tuned, &set);
    outcome(
        transferred >= applied,
        format!("radius x0.75: fine-tuned {transferred:.4} vs zero-shot {applied:.4}"),
    )
}

fn c11_clamp() -> Outcome {
    // strategies far from optimal so many clusters have MSE >= 1
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    for i in 0..200u64 {
        let cfg = desk_config(&mut rng);
        let r = NetworkRealization::generate(&cfg, 11000 + i).unwrap();
        let u = random_u(&r, &mut rng);
        let v: Vec<CVec> = optimal_receive_beamformers(&u, &r)
            .unwrap()
            .into_iter()
            .map(|v| v.scale(cn(&mut rng) * 10f64.powf(rng.random_range(-2.0..2.0))))
            .collect();
        rate_of(&TransceiverStrategy { u, v }, &r);
    }
    let seen = RATES_SEEN.load(Ordering::Relaxed);
    let neg = RATES_NEGATIVE.load(Ordering::Relaxed);
    let clamped = CLAMPED_SEEN.load(Ordering::Relaxed);
    outcome(
        neg == 0 && clamped > 0,
        format!("{seen} per-cluster rates reported in this run, {neg} negative, {clamped} with MSE >= 1"),
    )
}

fn main() -> ExitCode {
    // libtest-style flags from `cargo test` are ignored
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let names = [
        "MSE oracle equivalence",
        "beamformer optimality",
        "phase optimality",
        "SCA vs brute force",
        "AO monotonicity and convergence",
        "autodiff gradient check",
        "permutation equivariance",
        "desk-scale training efficacy",
        "inference speed",
        "fine-tuning direction",
        "rate clamp",
    ];
    let mut stats = AoStats { times: Vec::new(), scenarios: Vec::new() };
    let mut trained = None;
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !want(id) {
            continue;
        }
        let t = Instant::now();
        let o = match id {
            1 => c1_mse_oracle(),
            2 => c2_beamformer(),
            3 => c3_phase(),
            4 => c4_sca_brute_force(),
            5 => c5_ao(&mut stats),
            6 => c6_gradients(),
            7 => c7_equivariance(),
            8 => c8_training(&mut trained),
            9 => c9_speed(&stats),
            10 => c10_fine_tune(&trained),
            _ => c11_clamp(),
        };
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {id:>2}. {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
