//! Reverse-mode automatic differentiation over dense 2-D real arrays.
//!
//! A [`Tape`] records every operation in evaluation order, so the node list
//! is already topologically sorted and [`Tape::backward`] is one reverse
//! sweep. Complex arrays are stored as interleaved `(re, im)` pairs along the
//! column axis: a complex `r x c` matrix is a real `r x 2c` node. Gradients of
//! complex nodes use the same layout, `(dL/dre, dL/dim)`.

use thiserror::Error;

use crate::linalg::{CMat, CVec, Cholesky, LinalgError, C64};

pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Floor on `|z|` in magnitude and phase denominators.
pub const MAGNITUDE_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be a scalar, found {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("hermitian solve: {0}")]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(AutodiffError::Shape { op, detail })
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Ln,
    Log2,
    Sqrt,
    Tanh,
    Selu,
    Sigmoid,
    /// `max(x, 0)`, derivative 0 at the boundary.
    PosPart,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Ln => x.ln(),
            Unary::Log2 => x.log2(),
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::PosPart => x.max(0.0),
        }
    }

    // derivative from input x and output y
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Ln => 1.0 / x,
            Unary::Log2 => 1.0 / (x * std::f64::consts::LN_2),
            Unary::Sqrt => 0.5 / y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::PosPart => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MulScalar(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    SumRows(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize),
    Reshape(usize),
    Transpose(usize),
    Unary(usize, Unary),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Magnitude(usize),
    NormSq(usize),
    ComplexMul(usize, usize),
    Conj(usize),
    PhaseNormalize(usize),
    ScaleComplex(usize, usize),
    ComplexMatMul(usize, usize),
    HermitianSolve { a: usize, b: usize, factor: Cholesky },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a parameter leaf; `None` for constants or leaves the loss
    /// never touched.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but returns zeros of length `len` when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and dimensions describe slices checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_complex(cols: usize) -> bool {
    cols % 2 == 0
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check_len(op: &'static str, rows: usize, cols: usize, len: usize) -> Result<()> {
        if rows * cols != len {
            return shape_err(op, format!("{rows}x{cols} needs {} values, got {len}", rows * cols));
        }
        Ok(())
    }

    /// Trainable leaf.
    pub fn param(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        Self::check_len("param", rows, cols, value.len())?;
        Ok(self.push(rows, cols, value, Op::Leaf, true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        Self::check_len("constant", rows, cols, value.len())?;
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Leaf, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (rows, cols, value) = (n.rows, n.cols, n.value.clone());
        self.push(rows, cols, value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err(op, format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1));
        }
        Ok(sa)
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op_name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.needs(a);
        self.push(r, c, value, Op::Scale(a.0, s), ng)
    }

    /// `a + s` elementwise.
    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|x| x + s).collect();
        let ng = self.needs(a);
        self.push(r, c, value, Op::Offset(a.0), ng)
    }

    /// `s * a` with `s` a 1x1 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return shape_err("mul_scalar", format!("scalar operand is {:?}", self.shape(s)));
        }
        let (r, c) = self.shape(a);
        let sv = self.scalar(s);
        let value = self.value(a).iter().map(|x| x * sv).collect();
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(r, c, value, Op::MulScalar(a.0, s.0), ng))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return shape_err("add_row", format!("row {:?} for {r}x{c}", self.shape(row)));
        }
        let b = self.value(row);
        let value = self.value(a).chunks(c.max(1)).flat_map(|x| x.iter().zip(b).map(|(p, q)| p + q)).collect();
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(r, c, value, Op::AddRow(a.0, row.0), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} * {k2}x{n}"));
        }
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k as isize, 1), self.value(b), (n as isize, 1), &mut value);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, value, Op::MatMul(a.0, b.0), ng))
    }

    /// Matrix times column vector (`n x 1`).
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        if self.shape(x).1 != 1 {
            return shape_err("matvec", format!("vector operand is {:?}", self.shape(x)));
        }
        self.matmul(a, x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(1, 1, vec![s], Op::Sum(a.0), ng)
    }

    /// Sums each row, giving an `r x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = if c == 0 { vec![0.0; r] } else { self.value(a).chunks(c).map(|x| x.iter().sum()).collect() };
        let ng = self.needs(a);
        self.push(r, 1, value, Op::SumRows(a.0), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols", "no operands".into());
        };
        let r = self.shape(first).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != r) {
            return shape_err("concat_cols", format!("rows {} vs {r}", self.shape(bad).0));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                value.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(r, c, value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows", "no operands".into());
        };
        let c = self.shape(first).1;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).1 != c) {
            return shape_err("concat_rows", format!("cols {} vs {c}", self.shape(bad).1));
        }
        let r: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut value = Vec::with_capacity(r * c);
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(r, c, value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return shape_err("gather_rows", format!("row {bad} of {r}"));
        }
        let src = self.value(a);
        let value = idx.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        let ng = self.needs(a);
        Ok(self.push(idx.len(), c, value, Op::GatherRows(a.0, idx.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return shape_err("slice_cols", format!("{start}..{} of {c}", start + len));
        }
        let src = self.value(a);
        let value = (0..r).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        let ng = self.needs(a);
        Ok(self.push(r, len, value, Op::SliceCols(a.0, start), ng))
    }

    /// Same row-major data under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return shape_err("reshape", format!("{r}x{c} -> {rows}x{cols}"));
        }
        let value = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(rows, cols, value, Op::Reshape(a.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(a);
        self.push(c, r, value, Op::Transpose(a.0), ng)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|&x| f.apply(x)).collect();
        let ng = self.needs(a);
        self.push(r, c, value, Op::Unary(a.0, f), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn log2(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log2)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn selu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Selu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn pos_part(&mut self, a: Var) -> Var {
        self.unary(a, Unary::PosPart)
    }

    /// Row-wise layer normalization with per-column gain and bias (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return shape_err("layer_norm", format!("gain {:?}, bias {:?} for width {c}", self.shape(gain), self.shape(bias)));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut value = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c.max(1)).take(r) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                value.push(h * g[j] + b[j]);
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(r, c, value, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std }, ng))
    }

    fn complex_shape(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let (r, c) = self.shape(a);
        if !is_complex(c) {
            return shape_err(op, format!("{r}x{c} is not an interleaved complex array"));
        }
        Ok((r, c / 2))
    }

    /// `|z|` per complex entry: `r x 2c -> r x c`.
    pub fn magnitude(&mut self, z: Var) -> Result<Var> {
        let (r, c) = self.complex_shape("magnitude", z)?;
        let value = self.value(z).chunks(2).map(|p| p[0].hypot(p[1])).collect();
        let ng = self.needs(z);
        Ok(self.push(r, c, value, Op::Magnitude(z.0), ng))
    }

    /// `|z|^2` per complex entry.
    pub fn norm_sq(&mut self, z: Var) -> Result<Var> {
        let (r, c) = self.complex_shape("norm_sq", z)?;
        let value = self.value(z).chunks(2).map(|p| p[0] * p[0] + p[1] * p[1]).collect();
        let ng = self.needs(z);
        Ok(self.push(r, c, value, Op::NormSq(z.0), ng))
    }

    /// Elementwise complex product.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.complex_shape("complex_mul", a)?;
        let (r, c) = self.same_shape("complex_mul", a, b)?;
        let value = self
            .value(a)
            .chunks(2)
            .zip(self.value(b).chunks(2))
            .flat_map(|(x, y)| [x[0] * y[0] - x[1] * y[1], x[0] * y[1] + x[1] * y[0]])
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, value, Op::ComplexMul(a.0, b.0), ng))
    }

    pub fn complex_conj(&mut self, z: Var) -> Result<Var> {
        let (r, c) = self.complex_shape("complex_conj", z)?;
        let value = self.value(z).chunks(2).flat_map(|p| [p[0], -p[1]]).collect();
        let ng = self.needs(z);
        Ok(self.push(r, 2 * c, value, Op::Conj(z.0), ng))
    }

    /// `z / max(|z|, guard)` per complex entry.
    pub fn phase_normalize(&mut self, z: Var) -> Result<Var> {
        let (r, c) = self.complex_shape("phase_normalize", z)?;
        let value = self
            .value(z)
            .chunks(2)
            .flat_map(|p| {
                let m = p[0].hypot(p[1]).max(MAGNITUDE_GUARD);
                [p[0] / m, p[1] / m]
            })
            .collect();
        let ng = self.needs(z);
        Ok(self.push(r, 2 * c, value, Op::PhaseNormalize(z.0), ng))
    }

    /// Scales complex entries of `z` (`r x 2c`) by real `a` (`r x c`).
    pub fn scale_complex(&mut self, z: Var, a: Var) -> Result<Var> {
        let (r, c) = self.complex_shape("scale_complex", z)?;
        if self.shape(a) != (r, c) {
            return shape_err("scale_complex", format!("modulus {:?} for complex {r}x{c}", self.shape(a)));
        }
        let value = self.value(z).chunks(2).zip(self.value(a)).flat_map(|(p, &s)| [s * p[0], s * p[1]]).collect();
        let ng = self.needs(z) || self.needs(a);
        Ok(self.push(r, 2 * c, value, Op::ScaleComplex(z.0, a.0), ng))
    }

    /// Complex matrix product of `m x 2k` and `k x 2n` interleaved arrays.
    pub fn complex_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.complex_shape("complex_matmul", a)?;
        let (k2, n) = self.complex_shape("complex_matmul", b)?;
        if k != k2 {
            return shape_err("complex_matmul", format!("complex {m}x{k} * {k2}x{n}"));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = vec![0.0; m * 2 * n];
        for i in 0..m {
            for p in 0..k {
                let (ar, ai) = (av[2 * (i * k + p)], av[2 * (i * k + p) + 1]);
                for j in 0..n {
                    let (br, bi) = (bv[2 * (p * n + j)], bv[2 * (p * n + j) + 1]);
                    value[2 * (i * n + j)] += ar * br - ai * bi;
                    value[2 * (i * n + j) + 1] += ar * bi + ai * br;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, 2 * n, value, Op::ComplexMatMul(a.0, b.0), ng))
    }

    /// Solves `A x = b` for Hermitian positive-definite `A` (`M x 2M`) and a
    /// single complex column `b` (`M x 2`).
    pub fn hermitian_solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, m2) = self.complex_shape("hermitian_solve", a)?;
        if m != m2 || self.shape(b) != (m, 2) {
            return shape_err("hermitian_solve", format!("A {:?}, b {:?}", self.shape(a), self.shape(b)));
        }
        let mat = CMat::from_row_major(m, CVec::from_interleaved(self.value(a)).into_inner())?;
        let factor = Cholesky::factor(&mat)?;
        let x = factor.solve(&CVec::from_interleaved(self.value(b)))?;
        let value = x.as_interleaved().to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, 2, value, Op::HermitianSolve { a: a.0, b: b.0, factor }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
        let n = &self.nodes[i];
        if !n.needs_grad {
            return None;
        }
        Some(grads[i].get_or_insert_with(|| vec![0.0; n.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| self.nodes[i].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (p, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (p, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (y, z))| *x += y * z);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (y, z))| *x += y * z);
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
                }
            }
            Op::Offset(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::MulScalar(a, k) => {
                let kv = val(*k)[0];
                let dot: f64 = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += kv * y);
                }
                if let Some(s) = self.slot(grads, *k) {
                    s[0] += dot;
                }
            }
            Op::AddRow(a, row) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let c = node.cols;
                if let Some(s) = self.slot(grads, *row) {
                    for chunk in g.chunks(c.max(1)) {
                        s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = node.cols;
                let (av, bv) = (val(*a), val(*b));
                if let Some(s) = self.slot(grads, *a) {
                    // dA = G B^T
                    gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), s);
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = A^T G
                    gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), s);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::SumRows(a) => {
                let c = self.nodes[*a].cols;
                if let Some(s) = self.slot(grads, *a) {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += g[i / c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.cols;
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    if let Some(s) = self.slot(grads, p) {
                        for i in 0..node.rows {
                            let src = &g[i * c + off..i * c + off + pc];
                            s[i * pc..(i + 1) * pc].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = node.cols;
                if let Some(s) = self.slot(grads, *a) {
                    for (out, &src) in idx.iter().enumerate() {
                        s[src * c..(src + 1) * c].iter_mut().zip(&g[out * c..(out + 1) * c]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (c, len) = (self.nodes[*a].cols, node.cols);
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..node.rows {
                        s[i * c + start..i * c + start + len].iter_mut().zip(&g[i * len..(i + 1) * len]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[*a].rows, self.nodes[*a].cols);
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Unary(a, f) => {
                let x = val(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * f.deriv(x[i], node.value[i]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = node.cols;
                let gv = val(*gain);
                if let Some(s) = self.slot(grads, *bias) {
                    for chunk in g.chunks(c.max(1)) {
                        s.iter_mut().zip(chunk).for_each(|(p, q)| *p += q);
                    }
                }
                if let Some(s) = self.slot(grads, *gain) {
                    for (gc, hc) in g.chunks(c.max(1)).zip(xhat.chunks(c.max(1))) {
                        for j in 0..c {
                            s[j] += gc[j] * hc[j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for i in 0..node.rows {
                        let (gc, hc) = (&g[i * c..(i + 1) * c], &xhat[i * c..(i + 1) * c]);
                        for j in 0..c {
                            dh[j] = gc[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dh.iter().zip(hc).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for j in 0..c {
                            s[i * c + j] += inv_std[i] * (dh[j] - mean_dh - hc[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Magnitude(z) => {
                let zv = val(*z);
                if let Some(s) = self.slot(grads, *z) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = node.value[i].max(MAGNITUDE_GUARD);
                        s[2 * i] += gi * zv[2 * i] / d;
                        s[2 * i + 1] += gi * zv[2 * i + 1] / d;
                    }
                }
            }
            Op::NormSq(z) => {
                let zv = val(*z);
                if let Some(s) = self.slot(grads, *z) {
                    for (i, &gi) in g.iter().enumerate() {
                        s[2 * i] += 2.0 * gi * zv[2 * i];
                        s[2 * i + 1] += 2.0 * gi * zv[2 * i + 1];
                    }
                }
            }
            Op::ComplexMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                // dL/da = g * conj(b)
                for (target, other) in [(*a, bv), (*b, av)] {
                    if let Some(s) = self.slot(grads, target) {
                        for i in 0..g.len() / 2 {
                            let (gr, gi) = (g[2 * i], g[2 * i + 1]);
                            let (or, oi) = (other[2 * i], other[2 * i + 1]);
                            s[2 * i] += gr * or + gi * oi;
                            s[2 * i + 1] += gi * or - gr * oi;
                        }
                    }
                }
            }
            Op::Conj(z) => {
                if let Some(s) = self.slot(grads, *z) {
                    for i in 0..g.len() / 2 {
                        s[2 * i] += g[2 * i];
                        s[2 * i + 1] -= g[2 * i + 1];
                    }
                }
            }
            Op::PhaseNormalize(z) => {
                let zv = val(*z);
                if let Some(s) = self.slot(grads, *z) {
                    for i in 0..g.len() / 2 {
                        let (zr, zi) = (zv[2 * i], zv[2 * i + 1]);
                        let (gr, gi) = (g[2 * i], g[2 * i + 1]);
                        let a = zr.hypot(zi);
                        if a < MAGNITUDE_GUARD {
                            s[2 * i] += gr / MAGNITUDE_GUARD;
                            s[2 * i + 1] += gi / MAGNITUDE_GUARD;
                        } else {
                            let (pr, pi) = (zr / a, zi / a);
                            let proj = gr * pr + gi * pi;
                            s[2 * i] += (gr - proj * pr) / a;
                            s[2 * i + 1] += (gi - proj * pi) / a;
                        }
                    }
                }
            }
            Op::ScaleComplex(z, a) => {
                let (zv, av) = (val(*z), val(*a));
                if let Some(s) = self.slot(grads, *z) {
                    for i in 0..av.len() {
                        s[2 * i] += av[i] * g[2 * i];
                        s[2 * i + 1] += av[i] * g[2 * i + 1];
                    }
                }
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] += g[2 * i] * zv[2 * i] + g[2 * i + 1] * zv[2 * i + 1];
                    }
                }
            }
            Op::ComplexMatMul(a, b) => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols / 2);
                let n = node.cols / 2;
                let (av, bv) = (val(*a), val(*b));
                let at = |v: &[f64], i: usize| C64::new(v[2 * i], v[2 * i + 1]);
                if let Some(s) = self.slot(grads, *a) {
                    // dA = G B^H
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = C64::new(0.0, 0.0);
                            for j in 0..n {
                                acc += at(g, i * n + j) * at(bv, p * n + j).conj();
                            }
                            s[2 * (i * k + p)] += acc.re;
                            s[2 * (i * k + p) + 1] += acc.im;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = A^H G
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = C64::new(0.0, 0.0);
                            for i in 0..m {
                                acc += at(av, i * k + p).conj() * at(g, i * n + j);
                            }
                            s[2 * (p * n + j)] += acc.re;
                            s[2 * (p * n + j) + 1] += acc.im;
                        }
                    }
                }
            }
            Op::HermitianSolve { a, b, factor } => {
                let m = node.rows;
                let lambda = factor.solve(&CVec::from_interleaved(g)).expect("factor dimension fixed at forward");
                let lam = lambda.as_interleaved();
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(lam).for_each(|(x, y)| *x += y);
                }
                if let Some(s) = self.slot(grads, *a) {
                    let x = CVec::from_interleaved(&node.value);
                    for i in 0..m {
                        for j in 0..m {
                            let d = -lambda[i] * x[j].conj();
                            s[2 * (i * m + j)] += d.re;
                            s[2 * (i * m + j) + 1] += d.im;
                        }
                    }
                }
            }
        }
    }
}
