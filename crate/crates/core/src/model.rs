//! Unfolded graph neural network for transmit-scalar design.
//!
//! The model is `J` cascaded blocks. Block `j` takes the previous transmit
//! scalars `u`, computes every MMSE receive beamformer in closed form,
//! aligns each device's phase to its own beamformer, and predicts transmit
//! moduli with a heterogeneous device/center graph network:
//!
//! 1. five features per device and per fusion center,
//! 2. a `tanh` embedding to `hidden` dimensions,
//! 3. `I` message-passing layers weighted by signed coefficients
//!    `+|h^H v|` (own center) or `-|h^H v|` (other centers),
//! 4. an MLP decoder on `[device hidden, own center hidden]` whose sigmoid
//!    output is scaled to `[0, sqrt(P)]`.
//!
//! The first `ceil(J/2)` blocks share one parameter set and the remaining
//! blocks share a second. Everything runs on an [`autodiff::Tape`], so
//! the same code serves inference and training.

pub mod io;

pub use io::{load_model, read_model, save_model, write_model, ModelIoError, MODEL_MAGIC, MODEL_VERSION};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Var};
use crate::linalg::{CVec, C64};
use crate::metrics::TransceiverStrategy;
use crate::scenario::NetworkRealization;

pub const NUM_FEATURES: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("model input mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Model sizes. `decoder` lists the hidden widths between the `2 * hidden`
/// input and the scalar output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub blocks: usize,
    pub layers: usize,
    pub hidden: usize,
    pub decoder: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            blocks: 6,
            layers: 2,
            hidden: 32,
            decoder: vec![1000, 500, 32],
        }
    }
}

impl Architecture {
    /// Small configuration used for gradient checks and quick training runs.
    pub fn tiny() -> Self {
        Architecture {
            blocks: 2,
            layers: 1,
            hidden: 8,
            decoder: vec![64, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.decoder.contains(&0) {
            return Err(ModelError::Shape(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    /// Sharing group of block `j` (0-based).
    pub fn group_of(&self, j: usize) -> usize {
        usize::from(j >= self.blocks.div_ceil(2))
    }

    /// Full decoder widths including input and output.
    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![2 * self.hidden];
        w.extend(&self.decoder);
        w.push(1);
        w
    }
}

/// Row-major real matrix holding one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, x: f64) -> Self {
        Tensor { rows, cols, data: vec![x; rows * cols] }
    }

    fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor { rows, cols, data }
    }

    fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let d = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| d.sample(rng)).collect();
        Tensor { rows, cols, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Device transform (`hidden x hidden`, applied as `X W`).
    pub ups_d: Tensor,
    pub ups_f: Tensor,
    pub ln_d_gain: Tensor,
    pub ln_d_bias: Tensor,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// Parameters shared by the blocks of one sharing group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupParams {
    /// Device embedding (`5 x hidden`).
    pub omega_d: Tensor,
    pub omega_f: Tensor,
    pub layers: Vec<LayerParams>,
    pub decoder: Vec<Dense>,
}

impl GroupParams {
    fn zeros(arch: &Architecture) -> Self {
        let h = arch.hidden;
        let layers = (0..arch.layers)
            .map(|_| LayerParams {
                ups_d: Tensor::zeros(h, h),
                ups_f: Tensor::zeros(h, h),
                ln_d_gain: Tensor::filled(1, h, 1.0),
                ln_d_bias: Tensor::zeros(1, h),
                ln_f_gain: Tensor::filled(1, h, 1.0),
                ln_f_bias: Tensor::zeros(1, h),
            })
            .collect();
        let w = arch.decoder_widths();
        let decoder = w
            .windows(2)
            .map(|p| Dense { w: Tensor::zeros(p[0], p[1]), b: Tensor::zeros(1, p[1]) })
            .collect();
        GroupParams {
            omega_d: Tensor::zeros(NUM_FEATURES, h),
            omega_f: Tensor::zeros(NUM_FEATURES, h),
            layers,
            decoder,
        }
    }

    fn init(arch: &Architecture, rng: &mut ChaCha8Rng) -> Self {
        let h = arch.hidden;
        let mut g = GroupParams::zeros(arch);
        let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        g.omega_d = Tensor::uniform(NUM_FEATURES, h, xavier(NUM_FEATURES, h), rng);
        g.omega_f = Tensor::uniform(NUM_FEATURES, h, xavier(NUM_FEATURES, h), rng);
        for l in &mut g.layers {
            l.ups_d = Tensor::uniform(h, h, xavier(h, h), rng);
            l.ups_f = Tensor::uniform(h, h, xavier(h, h), rng);
        }
        // LeCun normal suits SELU
        for d in &mut g.decoder {
            d.w = Tensor::normal(d.w.rows, d.w.cols, (1.0 / d.w.rows as f64).sqrt(), rng);
        }
        g
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.omega_d, &self.omega_f];
        for l in &self.layers {
            v.extend([&l.ups_d, &l.ups_f, &l.ln_d_gain, &l.ln_d_bias, &l.ln_f_gain, &l.ln_f_bias]);
        }
        for d in &self.decoder {
            v.extend([&d.w, &d.b]);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.omega_d, &mut self.omega_f];
        for l in &mut self.layers {
            v.extend([
                &mut l.ups_d,
                &mut l.ups_f,
                &mut l.ln_d_gain,
                &mut l.ln_d_bias,
                &mut l.ln_f_gain,
                &mut l.ln_f_bias,
            ]);
        }
        for d in &mut self.decoder {
            v.extend([&mut d.w, &mut d.b]);
        }
        v
    }
}

/// All trainable parameters: exactly two sharing groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub groups: [GroupParams; 2],
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        ModelParams {
            arch: arch.clone(),
            groups: [GroupParams::zeros(arch), GroupParams::zeros(arch)],
        }
    }

    /// Xavier-uniform embedding and message weights, LeCun-normal decoder,
    /// zero biases, unit LayerNorm gains.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g0 = GroupParams::init(arch, &mut rng);
        let g1 = GroupParams::init(arch, &mut rng);
        ModelParams { arch: arch.clone(), groups: [g0, g1] }
    }

    /// Every parameter array in declaration order (group 0 then group 1).
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.groups.iter().flat_map(|g| g.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.groups.iter_mut().flat_map(|g| g.tensors_mut()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Switches for gradient flow through the closed-form parts of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Differentiate through the aggregation coefficients `+-|h^H v|`.
    pub attach_coefficients: bool,
    /// Treat beamformers and phases as constants of each block.
    pub detach_closed_form: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { attach_coefficients: false, detach_closed_form: false }
    }
}

impl ForwardOptions {
    /// Every path differentiated; the loss is then a smooth function of the
    /// parameters and matches finite differences.
    pub fn fully_attached() -> Self {
        ForwardOptions { attach_coefficients: true, detach_closed_form: false }
    }
}

/// Whether cluster rates keep the `log2+` clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateObjective {
    Unclamped,
    Clamped,
}

/// Per-realization constants, laid out for the tape.
pub(crate) struct Graph {
    devices: usize,
    clusters: usize,
    cluster_of: Vec<usize>,
    ranges: Vec<Range<usize>>,
    antennas: Vec<usize>,
    noise: Vec<f64>,
    /// Per center `k`: `D x 2M_k`, row `d` is `conj(h_{d,k})`.
    h_conj: Vec<Vec<f64>>,
    /// Per center `k`: `N_k x 2M_k`, rows `h_{n,k}` of its own devices.
    h_own: Vec<Vec<f64>>,
    /// Per center `k`: `D x 2M_k^2`, row `d` is `h_{d,k} h_{d,k}^H`.
    outer: Vec<Vec<f64>>,
    /// Per center `k`: `sigma_k^2 I` flattened to `1 x 2M_k^2`.
    noise_eye: Vec<Vec<f64>>,
    /// `D x K` indicator of `l == k`.
    own_mask: Vec<f64>,
    /// Per center `k`: `D x 2`, `(1, 0)` on its own devices.
    own_one: Vec<Vec<f64>>,
    sqrt_p: Vec<f64>,
    rate_coef: Vec<f64>,
}

impl Graph {
    pub(crate) fn new(r: &NetworkRealization) -> Self {
        let d = r.num_devices();
        let kk = r.num_clusters();
        let ids: Vec<_> = r.device_ids().collect();
        let cluster_of = r.cluster_of();
        let ranges = (0..kk).map(|k| r.cluster_range(k)).collect::<Vec<_>>();
        let antennas: Vec<usize> = r.clusters.iter().map(|c| c.antennas).collect();
        let mut h_conj = Vec::with_capacity(kk);
        let mut h_own = Vec::with_capacity(kk);
        let mut outer = Vec::with_capacity(kk);
        let mut noise_eye = Vec::with_capacity(kk);
        let mut own_one = Vec::with_capacity(kk);
        for k in 0..kk {
            let m = antennas[k];
            let mut hc = Vec::with_capacity(d * 2 * m);
            let mut ho = Vec::new();
            let mut op = Vec::with_capacity(d * 2 * m * m);
            for id in &ids {
                let h = r.channel(id.cluster, id.index, k).as_slice();
                hc.extend(h.iter().flat_map(|z| [z.re, -z.im]));
                if id.cluster == k {
                    ho.extend(h.iter().flat_map(|z| [z.re, z.im]));
                }
                for a in h {
                    for b in h {
                        let z = a * b.conj();
                        op.extend([z.re, z.im]);
                    }
                }
            }
            let mut eye = vec![0.0; 2 * m * m];
            for i in 0..m {
                eye[2 * (i * m + i)] = r.cluster(k).noise_power;
            }
            let mut one = vec![0.0; 2 * d];
            for i in ranges[k].clone() {
                one[2 * i] = 1.0;
            }
            h_conj.push(hc);
            h_own.push(ho);
            outer.push(op);
            noise_eye.push(eye);
            own_one.push(one);
        }
        let mut own_mask = vec![0.0; d * kk];
        for (i, &l) in cluster_of.iter().enumerate() {
            own_mask[i * kk + l] = 1.0;
        }
        Graph {
            devices: d,
            clusters: kk,
            sqrt_p: cluster_of.iter().map(|&l| r.cluster(l).max_power.sqrt()).collect(),
            rate_coef: r.clusters.iter().map(|c| c.weight * c.rate_scale()).collect(),
            noise: r.clusters.iter().map(|c| c.noise_power).collect(),
            cluster_of,
            ranges,
            antennas,
            h_conj,
            h_own,
            outer,
            noise_eye,
            own_mask,
            own_one,
        }
    }
}

/// Parameter leaves of one sharing group on a tape.
struct GroupVars {
    omega_d: Var,
    omega_f: Var,
    layers: Vec<[Var; 6]>,
    decoder: Vec<(Var, Var)>,
}

/// Graph constants on a tape.
struct GraphVars {
    h_conj: Vec<Var>,
    h_own: Vec<Var>,
    outer: Vec<Var>,
    noise_eye: Vec<Var>,
    own_one: Vec<Var>,
    own_mask: Var,
    other_mask: Var,
    sign: Var,
    ones_row: Var,
    sqrt_p: Var,
    rate_coef: Var,
}

/// Quantities a block computes before the learned part.
pub(crate) struct ClosedForm {
    pub v: Vec<Var>,
    /// Per center `k`: `h_{d,k}^H v_k` for every device, `D x 2`.
    pub gains: Vec<Var>,
    /// `|h_{d,k}^H v_k|`, `D x K`.
    pub magnitudes: Var,
    /// `h^H v / |h^H v|` toward each device's own center, `D x 2`.
    pub phase: Var,
}

/// Builds the model on a tape for one realization.
pub(crate) struct Builder<'a> {
    pub tape: Tape,
    graph: &'a Graph,
    g: GraphVars,
    opts: ForwardOptions,
}

fn leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> Result<Var> {
    Ok(if trainable {
        tape.param(t.rows, t.cols, t.data.clone())?
    } else {
        tape.constant(t.rows, t.cols, t.data.clone())?
    })
}

impl<'a> Builder<'a> {
    pub(crate) fn new(graph: &'a Graph, opts: ForwardOptions) -> Result<Self> {
        let mut tape = Tape::new();
        let (d, kk) = (graph.devices, graph.clusters);
        let per_k = |data: &Vec<Vec<f64>>, rows: &dyn Fn(usize) -> usize, tape: &mut Tape| -> Result<Vec<Var>> {
            data.iter()
                .enumerate()
                .map(|(k, x)| {
                    let r = rows(k);
                    Ok(tape.constant(r, x.len() / r.max(1), x.clone())?)
                })
                .collect()
        };
        let h_conj = per_k(&graph.h_conj, &|_| d, &mut tape)?;
        let h_own = per_k(&graph.h_own, &|k| graph.ranges[k].len(), &mut tape)?;
        let outer = per_k(&graph.outer, &|_| d, &mut tape)?;
        let noise_eye = per_k(&graph.noise_eye, &|_| 1, &mut tape)?;
        let own_one = per_k(&graph.own_one, &|_| d, &mut tape)?;
        let other: Vec<f64> = graph.own_mask.iter().map(|m| 1.0 - m).collect();
        let sign: Vec<f64> = graph.own_mask.iter().map(|m| 2.0 * m - 1.0).collect();
        let g = GraphVars {
            h_conj,
            h_own,
            outer,
            noise_eye,
            own_one,
            own_mask: tape.constant(d, kk, graph.own_mask.clone())?,
            other_mask: tape.constant(d, kk, other)?,
            sign: tape.constant(d, kk, sign)?,
            ones_row: tape.constant(1, kk, vec![1.0; kk])?,
            sqrt_p: tape.constant(d, 1, graph.sqrt_p.clone())?,
            rate_coef: tape.constant(kk, 1, graph.rate_coef.clone())?,
        };
        Ok(Builder { tape, graph, g, opts })
    }

    fn group_vars(&mut self, p: &GroupParams, trainable: bool) -> Result<GroupVars> {
        let t = &mut self.tape;
        let omega_d = leaf(t, &p.omega_d, trainable)?;
        let omega_f = leaf(t, &p.omega_f, trainable)?;
        let mut layers = Vec::with_capacity(p.layers.len());
        for l in &p.layers {
            layers.push([
                leaf(t, &l.ups_d, trainable)?,
                leaf(t, &l.ups_f, trainable)?,
                leaf(t, &l.ln_d_gain, trainable)?,
                leaf(t, &l.ln_d_bias, trainable)?,
                leaf(t, &l.ln_f_gain, trainable)?,
                leaf(t, &l.ln_f_bias, trainable)?,
            ]);
        }
        let mut decoder = Vec::with_capacity(p.decoder.len());
        for dl in &p.decoder {
            decoder.push((leaf(t, &dl.w, trainable)?, leaf(t, &dl.b, trainable)?));
        }
        Ok(GroupVars { omega_d, omega_f, layers, decoder })
    }

    /// Transmit scalars as a `D x 2` constant.
    pub(crate) fn scalars(&mut self, u: &[Vec<C64>]) -> Result<Var> {
        let flat: Vec<f64> = u.iter().flatten().flat_map(|z| [z.re, z.im]).collect();
        if flat.len() != 2 * self.graph.devices {
            return Err(ModelError::Shape(format!("{} scalars for {} devices", flat.len() / 2, self.graph.devices)));
        }
        Ok(self.tape.constant(self.graph.devices, 2, flat)?)
    }

    /// MMSE receive beamformer of every center for scalars `u` (`D x 2`).
    pub(crate) fn beamformers(&mut self, u: Var) -> Result<Vec<Var>> {
        let t = &mut self.tape;
        let p = t.norm_sq(u)?;
        let pt = t.transpose(p);
        let mut out = Vec::with_capacity(self.graph.clusters);
        for k in 0..self.graph.clusters {
            let m = self.graph.antennas[k];
            let range = &self.graph.ranges[k];
            let a = t.matmul(pt, self.g.outer[k])?;
            let a = t.add(a, self.g.noise_eye[k])?;
            let a = t.reshape(a, m, 2 * m)?;
            let uk = t.slice_rows(u, range.start, range.len())?;
            let uk = t.reshape(uk, 1, 2 * range.len())?;
            let b = t.complex_matmul(uk, self.g.h_own[k])?;
            let b = t.reshape(b, m, 2)?;
            out.push(t.hermitian_solve(a, b)?);
        }
        Ok(out)
    }

    /// `h_{d,k}^H v_k` for every device and center.
    pub(crate) fn gains(&mut self, v: &[Var]) -> Result<Vec<Var>> {
        (0..self.graph.clusters)
            .map(|k| Ok(self.tape.complex_matmul(self.g.h_conj[k], v[k])?))
            .collect()
    }

    pub(crate) fn closed_form(&mut self, u: Var) -> Result<ClosedForm> {
        let mut v = self.beamformers(u)?;
        if self.opts.detach_closed_form {
            v = v.into_iter().map(|x| self.tape.detach(x)).collect();
        }
        let gains = self.gains(&v)?;
        let t = &mut self.tape;
        let mags = gains.iter().map(|&q| t.magnitude(q)).collect::<std::result::Result<Vec<_>, _>>()?;
        let magnitudes = t.concat_cols(&mags)?;
        let own = (0..self.graph.clusters)
            .map(|k| {
                let r = &self.graph.ranges[k];
                t.slice_rows(gains[k], r.start, r.len())
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let own = t.concat_rows(&own)?;
        let mut phase = t.phase_normalize(own)?;
        if self.opts.detach_closed_form {
            phase = t.detach(phase);
        }
        Ok(ClosedForm { v, gains, magnitudes, phase })
    }

    /// Per-cluster MSE (`K x 1`) of scalars `u` with beamformers `v`.
    pub(crate) fn mse(&mut self, u: Var, v: &[Var], gains: &[Var]) -> Result<Var> {
        let t = &mut self.tape;
        let mut per = Vec::with_capacity(self.graph.clusters);
        for k in 0..self.graph.clusters {
            let qc = t.complex_conj(gains[k])?;
            let e = t.complex_mul(qc, u)?;
            let e = t.sub(e, self.g.own_one[k])?;
            let e = t.norm_sq(e)?;
            let terms = t.sum(e);
            let vv = t.norm_sq(v[k])?;
            let vv = t.sum(vv);
            let noise = t.scale(vv, self.graph.noise[k]);
            per.push(t.add(terms, noise)?);
        }
        Ok(t.concat_rows(&per)?)
    }

    /// Device (`D x 5`) and center (`K x 5`) features at `(u, v)`.
    pub(crate) fn features(&mut self, u: Var, cf: &ClosedForm) -> Result<(Var, Var)> {
        let mse = self.mse(u, &cf.v, &cf.gains)?;
        let t = &mut self.tape;
        let g = &self.g;
        let au = t.magnitude(u)?;
        let own = t.mul(cf.magnitudes, g.own_mask)?;
        let other = t.mul(cf.magnitudes, g.other_mask)?;
        let own_sum = t.sum_rows(own);
        let other_sum = t.sum_rows(other);
        let f4 = t.mul(own_sum, au)?;
        let f5 = t.mul(other_sum, au)?;
        let dev = t.concat_cols(&[au, own_sum, other_sum, f4, f5])?;

        let au_wide = t.matmul(au, g.ones_row)?;
        let own_u = t.mul(own, au_wide)?;
        let other_u = t.mul(other, au_wide)?;
        let mut cols = vec![mse];
        for x in [own, other, own_u, other_u] {
            let xt = t.transpose(x);
            cols.push(t.sum_rows(xt));
        }
        let cen = t.concat_cols(&cols)?;
        Ok((dev, cen))
    }

    /// Signed aggregation coefficients, `D x K`.
    pub(crate) fn coefficients(&mut self, cf: &ClosedForm) -> Result<Var> {
        let lam = self.tape.mul(cf.magnitudes, self.g.sign)?;
        Ok(if self.opts.attach_coefficients { lam } else { self.tape.detach(lam) })
    }

    fn learned_moduli(&mut self, gv: &GroupVars, dev: Var, cen: Var, lam: Var) -> Result<Var> {
        let t = &mut self.tape;
        let (hd, hc) = embed(t, gv, dev, cen)?;
        let (hd, hc) = encode(t, gv, hd, hc, lam, true)?;
        let own_c = t.gather_rows(hc, &self.graph.cluster_of)?;
        let z = t.concat_cols(&[hd, own_c])?;
        let a = decode(t, gv, z)?;
        Ok(t.mul(a, self.g.sqrt_p)?)
    }

    fn block(&mut self, gv: &GroupVars, u: Var) -> Result<Var> {
        let cf = self.closed_form(u)?;
        let (dev, cen) = self.features(u, &cf)?;
        let lam = self.coefficients(&cf)?;
        let a = self.learned_moduli(gv, dev, cen, lam)?;
        Ok(self.tape.scale_complex(cf.phase, a)?)
    }

    /// Runs all blocks; returns per-group parameter vars and final scalars.
    fn run(&mut self, params: &ModelParams, u0: Var, trainable: bool) -> Result<([GroupVars; 2], Var)> {
        let g0 = self.group_vars(&params.groups[0], trainable)?;
        let g1 = self.group_vars(&params.groups[1], trainable)?;
        let groups = [g0, g1];
        let mut u = u0;
        for j in 0..params.arch.blocks {
            u = self.block(&groups[params.arch.group_of(j)], u)?;
        }
        Ok((groups, u))
    }

    /// Weighted sum rate (`1 x 1`) of scalars `u` with their MMSE beamformers.
    fn rate(&mut self, u: Var, objective: RateObjective) -> Result<(Var, Vec<Var>, Var)> {
        let v = self.beamformers(u)?;
        let gains = self.gains(&v)?;
        let mse = self.mse(u, &v, &gains)?;
        let t = &mut self.tape;
        let l = t.log2(mse);
        let mut r = t.scale(l, -1.0);
        if objective == RateObjective::Clamped {
            r = t.pos_part(r);
        }
        let w = t.mul(r, self.g.rate_coef)?;
        Ok((t.sum(w), v, mse))
    }

    fn strategy(&self, u: Var, v: &[Var]) -> TransceiverStrategy {
        let flat = self.tape.value(u);
        let u = self
            .graph
            .ranges
            .iter()
            .map(|r| r.clone().map(|i| C64::new(flat[2 * i], flat[2 * i + 1])).collect())
            .collect();
        let v = v.iter().map(|&x| CVec::from_interleaved(self.tape.value(x))).collect();
        TransceiverStrategy { u, v }
    }
}

fn embed(t: &mut Tape, gv: &GroupVars, dev: Var, cen: Var) -> Result<(Var, Var)> {
    let hd = t.matmul(dev, gv.omega_d)?;
    let hc = t.matmul(cen, gv.omega_f)?;
    Ok((t.tanh(hd), t.tanh(hc)))
}

// devices update first from the previous center states; centers then read
// the updated device states
fn message_pass(t: &mut Tape, lp: &[Var; 6], hd: Var, hc: Var, lam: Var, norm: bool) -> Result<(Var, Var)> {
    let [ups_d, ups_f, gd, bd, gf, bf] = *lp;
    let self_d = t.matmul(hd, ups_d)?;
    let msg_f = t.matmul(hc, ups_f)?;
    let agg_d = t.matmul(lam, msg_f)?;
    let mut new_d = t.add(self_d, agg_d)?;
    if norm {
        new_d = t.layer_norm(new_d, gd, bd)?;
    }
    let msg_d = t.matmul(new_d, ups_d)?;
    let lam_t = t.transpose(lam);
    let agg_f = t.matmul(lam_t, msg_d)?;
    let mut new_f = t.add(msg_f, agg_f)?;
    if norm {
        new_f = t.layer_norm(new_f, gf, bf)?;
    }
    Ok((new_d, new_f))
}

fn encode(t: &mut Tape, gv: &GroupVars, mut hd: Var, mut hc: Var, lam: Var, norm: bool) -> Result<(Var, Var)> {
    for lp in &gv.layers {
        (hd, hc) = message_pass(t, lp, hd, hc, lam, norm)?;
    }
    Ok((hd, hc))
}

fn decode(t: &mut Tape, gv: &GroupVars, mut z: Var) -> Result<Var> {
    let last = gv.decoder.len() - 1;
    for (i, &(w, b)) in gv.decoder.iter().enumerate() {
        let y = t.matmul(z, w)?;
        let y = t.add_row(y, b)?;
        z = if i == last { t.sigmoid(y) } else { t.selu(y) };
    }
    Ok(z)
}

fn check_realization(params: &ModelParams, r: &NetworkRealization, u_init: &[Vec<C64>]) -> Result<()> {
    params.arch.validate()?;
    if u_init.len() != r.num_clusters() || u_init.iter().zip(&r.clusters).any(|(u, c)| u.len() != c.devices) {
        return Err(ModelError::Shape("initial scalars do not match the realization".into()));
    }
    Ok(())
}

/// Deterministic inference start: full power, zero phase.
pub fn initial_scalars(r: &NetworkRealization) -> Vec<Vec<C64>> {
    TransceiverStrategy::full_power(r).u
}

/// Runs the unfolded model; the returned beamformers are the MMSE
/// beamformers of the final transmit scalars.
pub fn model_forward(r: &NetworkRealization, params: &ModelParams, u_init: &[Vec<C64>]) -> Result<TransceiverStrategy> {
    check_realization(params, r, u_init)?;
    let graph = Graph::new(r);
    let mut b = Builder::new(&graph, ForwardOptions::default())?;
    let u0 = b.scalars(u_init)?;
    let (_, u) = b.run(params, u0, false)?;
    let v = b.beamformers(u)?;
    let s = b.strategy(u, &v);
    if !b.tape.value(u).iter().all(|x| x.is_finite()) {
        return Err(ModelError::NonFinite("transmit scalars"));
    }
    Ok(s)
}

/// Transmit scalars after each block, for inspection.
pub fn block_outputs(r: &NetworkRealization, params: &ModelParams, u_init: &[Vec<C64>]) -> Result<Vec<TransceiverStrategy>> {
    check_realization(params, r, u_init)?;
    let graph = Graph::new(r);
    let mut b = Builder::new(&graph, ForwardOptions::default())?;
    let mut u = b.scalars(u_init)?;
    let g0 = b.group_vars(&params.groups[0], false)?;
    let g1 = b.group_vars(&params.groups[1], false)?;
    let groups = [g0, g1];
    let mut out = Vec::with_capacity(params.arch.blocks);
    for j in 0..params.arch.blocks {
        u = b.block(&groups[params.arch.group_of(j)], u)?;
        let v = b.beamformers(u)?;
        out.push(b.strategy(u, &v));
    }
    Ok(out)
}

/// One sample's objective and its gradient.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    /// Weighted sum rate under the requested objective.
    pub objective: f64,
    /// Weighted sum rate with the clamp, as reported to users.
    pub rate: f64,
    pub mse: Vec<f64>,
    /// `d objective / d parameter`, aligned with [`ModelParams::tensors`].
    pub grads: Vec<Vec<f64>>,
}

/// Forward and backward pass of the weighted sum rate for one realization.
pub fn rate_gradient(
    r: &NetworkRealization,
    params: &ModelParams,
    u_init: &[Vec<C64>],
    objective: RateObjective,
    opts: ForwardOptions,
) -> Result<SampleGradient> {
    check_realization(params, r, u_init)?;
    let graph = Graph::new(r);
    let mut b = Builder::new(&graph, opts)?;
    let u0 = b.scalars(u_init)?;
    let (groups, u) = b.run(params, u0, true)?;
    let (obj, _, mse) = b.rate(u, objective)?;
    let objective_value = b.tape.scalar(obj);
    if !objective_value.is_finite() {
        return Err(ModelError::NonFinite("rate objective"));
    }
    let mse: Vec<f64> = b.tape.value(mse).to_vec();
    let rate = mse
        .iter()
        .zip(&graph.rate_coef)
        .map(|(&m, &c)| c * (-m.log2()).max(0.0))
        .sum();
    let g = b.tape.backward(obj)?;
    let grads = collect_grads(&g, &groups, params);
    Ok(SampleGradient { objective: objective_value, rate, mse, grads })
}

fn collect_grads(g: &Gradients, groups: &[GroupVars; 2], params: &ModelParams) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (gv, gp) in groups.iter().zip(&params.groups) {
        let vars = std::iter::once(gv.omega_d)
            .chain(std::iter::once(gv.omega_f))
            .chain(gv.layers.iter().flat_map(|l| l.iter().copied()))
            .chain(gv.decoder.iter().flat_map(|&(w, b)| [w, b]));
        for (v, t) in vars.zip(gp.tensors()) {
            out.push(g.get_or_zeros(v, t.data.len()));
        }
    }
    out
}

/// Weighted sum rate only, without building gradients.
pub fn rate_value(
    r: &NetworkRealization,
    params: &ModelParams,
    u_init: &[Vec<C64>],
    objective: RateObjective,
    opts: ForwardOptions,
) -> Result<f64> {
    check_realization(params, r, u_init)?;
    let graph = Graph::new(r);
    let mut b = Builder::new(&graph, opts)?;
    let u0 = b.scalars(u_init)?;
    let (_, u) = b.run(params, u0, false)?;
    let (obj, _, _) = b.rate(u, objective)?;
    Ok(b.tape.scalar(obj))
}

/// Features of one block input, for inspection and tests.
#[derive(Debug, Clone)]
pub struct BlockFeatures {
    pub device: Vec<[f64; NUM_FEATURES]>,
    pub center: Vec<[f64; NUM_FEATURES]>,
    /// `coefficients[d][k]`, signed `|h_{d,k}^H v_k|`.
    pub coefficients: Vec<Vec<f64>>,
    pub beamformers: Vec<CVec>,
    pub phases: Vec<C64>,
}

/// Closed-form beamformers, phases and graph features for scalars `u_prev`.
pub fn block_features(r: &NetworkRealization, u_prev: &[Vec<C64>]) -> Result<BlockFeatures> {
    let graph = Graph::new(r);
    let mut b = Builder::new(&graph, ForwardOptions::default())?;
    let u = b.scalars(u_prev)?;
    let cf = b.closed_form(u)?;
    let (dev, cen) = b.features(u, &cf)?;
    let lam = b.coefficients(&cf)?;
    let rows = |x: &[f64]| -> Vec<[f64; NUM_FEATURES]> {
        x.chunks(NUM_FEATURES).map(|c| c.try_into().expect("five columns")).collect()
    };
    let t = &b.tape;
    let kk = graph.clusters;
    Ok(BlockFeatures {
        device: rows(t.value(dev)),
        center: rows(t.value(cen)),
        coefficients: t.value(lam).chunks(kk).map(|c| c.to_vec()).collect(),
        beamformers: cf.v.iter().map(|&x| CVec::from_interleaved(t.value(x))).collect(),
        phases: t.value(cf.phase).chunks(2).map(|p| C64::new(p[0], p[1])).collect(),
    })
}
