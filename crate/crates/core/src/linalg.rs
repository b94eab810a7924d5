//! Small dense complex linear algebra.
//!
//! Complex numbers are `num_complex::Complex64`, which is `repr(C)` and
//! therefore laid out as an interleaved `(re, im)` pair. The autodiff tape
//! reads and writes the same buffers as plain `f64` slices.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not Hermitian at ({row}, {col})")]
    NotHermitian { row: usize, col: usize },
    #[error("matrix is numerically singular (pivot {pivot:e} at index {index})")]
    Singular { index: usize, pivot: f64 },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// A fixed-length complex vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVec(Vec<C64>);

impl CVec {
    pub fn new(entries: Vec<C64>) -> Self {
        CVec(entries)
    }

    pub fn zeros(len: usize) -> Self {
        CVec(vec![C64::new(0.0, 0.0); len])
    }

    /// Builds a vector from interleaved `(re, im)` pairs.
    pub fn from_interleaved(pairs: &[f64]) -> Self {
        assert!(pairs.len() % 2 == 0, "interleaved buffer must have even length");
        CVec(pairs.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<C64> {
        self.0
    }

    /// View as interleaved `(re, im)` reals.
    pub fn as_interleaved(&self) -> &[f64] {
        complex_as_reals(&self.0)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn scale(&self, s: C64) -> CVec {
        CVec(self.0.iter().map(|&z| z * s).collect())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: C64, other: &CVec) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl std::ops::Index<usize> for CVec {
    type Output = C64;
    fn index(&self, i: usize) -> &C64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for CVec {
    fn index_mut(&mut self, i: usize) -> &mut C64 {
        &mut self.0[i]
    }
}

impl FromIterator<C64> for CVec {
    fn from_iter<I: IntoIterator<Item = C64>>(iter: I) -> Self {
        CVec(iter.into_iter().collect())
    }
}

/// Reinterprets a complex slice as interleaved reals.
pub fn complex_as_reals(z: &[C64]) -> &[f64] {
    // SAFETY: Complex<f64> is repr(C) { re: f64, im: f64 }.
    unsafe { std::slice::from_raw_parts(z.as_ptr() as *const f64, z.len() * 2) }
}

/// A square complex matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    n: usize,
    data: Vec<C64>,
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        CMat {
            n,
            data: vec![C64::new(0.0, 0.0); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_diag(diag: &[C64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Row-major construction; `data.len()` must be a perfect square.
    pub fn from_row_major(n: usize, data: Vec<C64>) -> Result<Self> {
        check_len(n * n, data.len())?;
        Ok(CMat { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_interleaved(&self) -> &[f64] {
        complex_as_reals(&self.data)
    }

    pub fn add_diag(&mut self, s: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += s;
        }
    }

    pub fn matvec(&self, x: &CVec) -> Result<CVec> {
        check_len(self.n, x.len())?;
        Ok((0..self.n)
            .map(|i| {
                let row = &self.data[i * self.n..(i + 1) * self.n];
                row.iter().zip(x.as_slice()).map(|(&a, &b)| a * b).sum()
            })
            .collect())
    }

    pub fn trace(&self) -> C64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Exact Hermitian symmetry check with an entrywise tolerance relative
    /// to the largest entry.
    pub fn check_hermitian(&self, rel_tol: f64) -> Result<()> {
        let tol = rel_tol * self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.n {
            for j in i..self.n {
                if (self[(i, j)] - self[(j, i)].conj()).norm() > tol {
                    return Err(LinalgError::NotHermitian { row: i, col: j });
                }
            }
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.n + j]
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(LinalgError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// `a^H b`, conjugate-linear in `a`.
pub fn inner(a: &CVec, b: &CVec) -> Result<C64> {
    check_len(a.len(), b.len())?;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, &y)| x.conj() * y)
        .sum())
}

/// Returns `acc + scale * h h^H`.
pub fn outer_accum(h: &CVec, scale: f64, mut acc: CMat) -> Result<CMat> {
    outer_accum_in_place(h, scale, &mut acc)?;
    Ok(acc)
}

pub fn outer_accum_in_place(h: &CVec, scale: f64, acc: &mut CMat) -> Result<()> {
    check_len(acc.n, h.len())?;
    if scale == 0.0 {
        return Ok(());
    }
    let n = acc.n;
    let hs = h.as_slice();
    for i in 0..n {
        // diagonal stays exactly real
        acc.data[i * n + i] += C64::new(scale * hs[i].norm_sqr(), 0.0);
        for j in (i + 1)..n {
            let v = hs[i] * hs[j].conj() * scale;
            acc.data[i * n + j] += v;
            acc.data[j * n + i] += v.conj();
        }
    }
    Ok(())
}

/// Cholesky factor `A = L L^H` of a Hermitian positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<C64>,
}

/// Pivots below this fraction of the largest diagonal entry are treated as
/// singular.
pub const SINGULAR_PIVOT_RATIO: f64 = 1e-14;

const HERMITIAN_TOL: f64 = 1e-10;

impl Cholesky {
    pub fn factor(a: &CMat) -> Result<Self> {
        a.check_hermitian(HERMITIAN_TOL)?;
        let n = a.n;
        let max_diag = (0..n).map(|i| a[(i, i)].re).fold(0.0, f64::max);
        let floor = SINGULAR_PIVOT_RATIO * max_diag;
        let mut l = vec![C64::new(0.0, 0.0); n * n];
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if !(d > floor) || d <= 0.0 {
                return Err(LinalgError::Singular { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = C64::new(djj, 0.0);
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Cholesky { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &CVec) -> Result<CVec> {
        check_len(self.n, b.len())?;
        let n = self.n;
        let l = &self.lower;
        let mut y = b.as_slice().to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i].re;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i].conj() * y[k];
            }
            y[i] = s / l[i * n + i].re;
        }
        Ok(CVec(y))
    }
}

/// Solves `A x = b` for Hermitian positive-definite `A`.
pub fn hermitian_solve(a: &CMat, b: &CVec) -> Result<CVec> {
    check_len(a.n, b.len())?;
    Cholesky::factor(a)?.solve(b)
}

/// Solves a real symmetric positive-definite system in place via Cholesky.
/// `a` is row-major `n x n` and is overwritten by its factor.
pub(crate) fn real_spd_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    check_len(n * n, a.len())?;
    check_len(n, b.len())?;
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    let floor = SINGULAR_PIVOT_RATIO * max_diag;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > floor) || d <= 0.0 {
            return Err(LinalgError::Singular { index: j, pivot: d });
        }
        let djj = d.sqrt();
        a[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / djj;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_vec(rng: &mut impl Rng, n: usize) -> CVec {
        (0..n)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let b = CVec::new(vec![c(1.0, 0.0), c(0.0, 2.0)]);
        let x = hermitian_solve(&CMat::identity(2), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn diagonal_solve() {
        let a = CMat::from_diag(&[c(2.0, 0.0), c(4.0, 0.0)]);
        let b = CVec::new(vec![c(2.0, 0.0), c(4.0, 0.0)]);
        let x = hermitian_solve(&a, &b).unwrap();
        for z in x.as_slice() {
            assert!((z - c(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn random_gram_solve_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 8;
            let mut a = CMat::identity(n);
            for _ in 0..n {
                let col = random_vec(&mut rng, n);
                outer_accum_in_place(&col, 1.0, &mut a).unwrap();
            }
            let b = random_vec(&mut rng, n);
            let x = hermitian_solve(&a, &b).unwrap();
            let mut r = a.matvec(&x).unwrap();
            r.axpy(c(-1.0, 0.0), &b).unwrap();
            assert!(r.norm() <= 1e-10 * (a.norm() * x.norm() + b.norm()));
        }
    }

    #[test]
    fn non_hermitian_rejected() {
        let mut a = CMat::identity(2);
        a[(0, 1)] = c(0.5, 0.0);
        let err = hermitian_solve(&a, &CVec::zeros(2)).unwrap_err();
        assert!(matches!(err, LinalgError::NotHermitian { .. }));
    }

    #[test]
    fn singular_rejected() {
        let h = CVec::new(vec![c(1.0, 0.0), c(1.0, 0.0)]);
        let a = outer_accum(&h, 1.0, CMat::zeros(2)).unwrap();
        let err = hermitian_solve(&a, &h).unwrap_err();
        assert!(matches!(err, LinalgError::Singular { index: 1, .. }));
    }

    #[test]
    fn solve_dimension_mismatch() {
        let err = hermitian_solve(&CMat::identity(3), &CVec::zeros(2)).unwrap_err();
        assert_eq!(err, LinalgError::DimensionMismatch { expected: 3, found: 2 });
    }

    #[test]
    fn outer_accum_cases() {
        let h = CVec::new(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let m = outer_accum(&h, 1.0, CMat::zeros(2)).unwrap();
        assert_eq!(m.as_slice(), &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);

        let acc = CMat::identity(2);
        assert_eq!(outer_accum(&h, 0.0, acc.clone()).unwrap(), acc);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_vec(&mut rng, 5);
        let m = outer_accum(&h, 2.5, CMat::zeros(5)).unwrap();
        assert!((m.trace().re - 2.5 * h.norm_sqr()).abs() < 1e-12);
        assert_eq!(m.trace().im, 0.0);

        assert!(outer_accum(&h, 1.0, CMat::zeros(4)).is_err());
    }

    #[test]
    fn inner_cases() {
        let a = CVec::new(vec![c(1.0, 0.0), c(0.0, 1.0)]);
        assert_eq!(inner(&a, &a).unwrap(), c(2.0, 0.0));
        let e1 = CVec::new(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let e2 = CVec::new(vec![c(0.0, 0.0), c(1.0, 0.0)]);
        assert_eq!(inner(&e1, &e2).unwrap(), c(0.0, 0.0));
        assert!(inner(&e1, &CVec::zeros(3)).is_err());
    }

    #[test]
    fn real_spd_solve_matches() {
        let mut a = vec![4.0, 1.0, 1.0, 3.0];
        let mut b = vec![1.0, 2.0];
        real_spd_solve(&mut a, &mut b, 2).unwrap();
        assert!((4.0 * b[0] + b[1] - 1.0).abs() < 1e-14);
        assert!((b[0] + 3.0 * b[1] - 2.0).abs() < 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cvec(n: usize) -> impl Strategy<Value = CVec> {
            proptest::collection::vec((-2.0..2.0f64, -2.0..2.0f64), n)
                .prop_map(|v| v.into_iter().map(|(r, i)| C64::new(r, i)).collect())
        }

        proptest! {
            #[test]
            fn inner_is_conjugate_symmetric((a, b) in (1usize..8).prop_flat_map(|n| (cvec(n), cvec(n)))) {
                let ab = inner(&a, &b).unwrap();
                let ba = inner(&b, &a).unwrap();
                prop_assert!((ab - ba.conj()).norm() <= 1e-12 * (1.0 + ab.norm()));
                let aa = inner(&a, &a).unwrap();
                prop_assert!(aa.im == 0.0 || aa.im.abs() < 1e-15);
                prop_assert!(aa.re >= 0.0);
            }

            #[test]
            fn outer_accum_keeps_exact_hermitian_symmetry(
                (h, g) in (1usize..7).prop_flat_map(|n| (cvec(n), cvec(n))),
                s1 in 0.0..3.0f64, s2 in 0.0..3.0f64,
            ) {
                let n = h.len();
                let m = outer_accum(&g, s2, outer_accum(&h, s1, CMat::zeros(n)).unwrap()).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        prop_assert_eq!(m[(i, j)], m[(j, i)].conj());
                    }
                }
            }

            #[test]
            fn solve_then_multiply_reproduces_rhs(
                (cols, b) in (1usize..7).prop_flat_map(|n| (proptest::collection::vec(cvec(n), n), cvec(n))),
            ) {
                let n = b.len();
                let mut a = CMat::identity(n);
                for col in &cols {
                    outer_accum_in_place(col, 1.0, &mut a).unwrap();
                }
                let x = hermitian_solve(&a, &b).unwrap();
                let mut r = a.matvec(&x).unwrap();
                r.axpy(C64::new(-1.0, 0.0), &b).unwrap();
                prop_assert!(r.norm() <= 1e-10 * (1.0 + b.norm()));
            }
        }
    }
}
