//! Fixed-capacity complex matrices for the pointwise kernels (n <= 3).
//!
//! Every grid point carries an n x n Hermitian matrix, so these types live on
//! the stack and avoid any allocation in the hot loops.

use std::f64::consts::PI;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;

/// Largest supported complex dimension.
pub const MAX_DIM: usize = 3;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Sorted eigenvalues of a Hermitian matrix; only the first `n` slots are used.
pub type Spectrum = [f64; MAX_DIM];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CMat {
    n: usize,
    a: [[Complex64; MAX_DIM]; MAX_DIM],
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n), "matrix dimension {n} unsupported");
        CMat {
            n,
            a: [[ZERO; MAX_DIM]; MAX_DIM],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i][i] = ONE;
        }
        m
    }

    pub fn from_real_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &x) in d.iter().enumerate() {
            m.a[i][i] = Complex64::new(x, 0.0);
        }
        m
    }

    /// Builds an n x n matrix from row-major entries.
    pub fn from_rows(n: usize, entries: &[Complex64]) -> Self {
        assert_eq!(entries.len(), n * n);
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.a[i][j] = entries[i * n + j];
            }
        }
        m
    }

    pub fn from_real_rows(n: usize, entries: &[f64]) -> Self {
        let c: Vec<Complex64> = entries.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        Self::from_rows(n, &c)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                m.a[i][j] *= s;
            }
        }
        m
    }

    pub fn scale_c(&self, s: Complex64) -> Self {
        let mut m = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                m.a[i][j] *= s;
            }
        }
        m
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m.a[i][j] = self.a[j][i].conj();
            }
        }
        m
    }

    /// (M + M^H) / 2.
    pub fn hermitian_part(&self) -> Self {
        (*self + self.adjoint()).scale(0.5)
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.n).map(|i| self.a[i][i]).sum()
    }

    pub fn det(&self) -> Complex64 {
        let a = &self.a;
        match self.n {
            1 => a[0][0],
            2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
            _ => {
                a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                    - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                    + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
            }
        }
    }

    /// Inverse by adjugate; `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Self> {
        let d = self.det();
        if d.norm() == 0.0 || !d.is_finite() {
            return None;
        }
        let a = &self.a;
        let mut m = Self::zeros(self.n);
        match self.n {
            1 => m.a[0][0] = ONE / a[0][0],
            2 => {
                m.a[0][0] = a[1][1];
                m.a[0][1] = -a[0][1];
                m.a[1][0] = -a[1][0];
                m.a[1][1] = a[0][0];
                m = m.scale_c(ONE / d);
            }
            _ => {
                for i in 0..3 {
                    for j in 0..3 {
                        let (r0, r1) = others(j);
                        let (c0, c1) = others(i);
                        let minor = a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0];
                        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                        m.a[i][j] = minor * sign;
                    }
                }
                m = m.scale_c(ONE / d);
            }
        }
        Some(m)
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.a[i][j].norm_sqr();
            }
        }
        s.sqrt()
    }

    /// Frobenius-norm condition number estimate ‖M‖·‖M⁻¹‖.
    pub fn condition(&self) -> f64 {
        match self.inverse() {
            Some(inv) => self.frobenius_norm() * inv.frobenius_norm(),
            None => f64::INFINITY,
        }
    }

    pub fn hermitian_defect(&self) -> f64 {
        (*self - self.adjoint()).frobenius_norm()
    }

    pub fn is_finite(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.a[i][j].is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max(self.a[i][j].norm());
            }
        }
        m
    }
}

fn others(i: usize) -> (usize, usize) {
    match i {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = Complex64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        debug_assert!(i < self.n && j < self.n);
        &self.a[i][j]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        debug_assert!(i < self.n && j < self.n);
        &mut self.a[i][j]
    }
}

impl Add for CMat {
    type Output = CMat;
    fn add(self, rhs: CMat) -> CMat {
        debug_assert_eq!(self.n, rhs.n);
        let mut m = self;
        for i in 0..self.n {
            for j in 0..self.n {
                m.a[i][j] += rhs.a[i][j];
            }
        }
        m
    }
}

impl Sub for CMat {
    type Output = CMat;
    fn sub(self, rhs: CMat) -> CMat {
        debug_assert_eq!(self.n, rhs.n);
        let mut m = self;
        for i in 0..self.n {
            for j in 0..self.n {
                m.a[i][j] -= rhs.a[i][j];
            }
        }
        m
    }
}

impl Mul for CMat {
    type Output = CMat;
    fn mul(self, rhs: CMat) -> CMat {
        debug_assert_eq!(self.n, rhs.n);
        let n = self.n;
        let mut m = CMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self.a[i][k];
                for j in 0..n {
                    m.a[i][j] += aik * rhs.a[k][j];
                }
            }
        }
        m
    }
}

/// Eigenvalues of a Hermitian matrix in ascending order, by closed-form
/// characteristic-polynomial roots followed by one Newton polish (n = 3).
///
/// Only the Hermitian part of `m` is read: the upper triangle and the real
/// diagonal.
pub fn hermitian_eigenvalues(m: &CMat) -> Spectrum {
    let mut out = [0.0; MAX_DIM];
    match m.n {
        1 => out[0] = m.a[0][0].re,
        2 => {
            let a = m.a[0][0].re;
            let d = m.a[1][1].re;
            let c = m.a[0][1];
            let mean = 0.5 * (a + d);
            let half = 0.5 * (a - d);
            let r = (half * half + c.norm_sqr()).sqrt();
            // Recover the smaller-magnitude root from the product to avoid
            // cancellation when both roots share a sign.
            let prod = a * d - c.norm_sqr();
            let (lo, hi) = if mean >= 0.0 {
                let hi = mean + r;
                let lo = if hi != 0.0 { prod / hi } else { mean - r };
                (lo, hi)
            } else {
                let lo = mean - r;
                let hi = if lo != 0.0 { prod / lo } else { mean + r };
                (lo, hi)
            };
            out[0] = lo.min(hi);
            out[1] = lo.max(hi);
        }
        _ => {
            let vals = cubic_eigenvalues(m);
            out.copy_from_slice(&vals);
        }
    }
    out
}

fn cubic_eigenvalues(m: &CMat) -> [f64; 3] {
    let a = &m.a;
    let (a00, a11, a22) = (a[0][0].re, a[1][1].re, a[2][2].re);
    let (a01, a02, a12) = (a[0][1], a[0][2], a[1][2]);
    let p1 = a01.norm_sqr() + a02.norm_sqr() + a12.norm_sqr();
    let mut ev = if p1 == 0.0 {
        [a00, a11, a22]
    } else {
        let q = (a00 + a11 + a22) / 3.0;
        let p2 = (a00 - q).powi(2) + (a11 - q).powi(2) + (a22 - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        // det((A - qI)/p) / 2, real for Hermitian input.
        let (b00, b11, b22) = ((a00 - q) / p, (a11 - q) / p, (a22 - q) / p);
        let (b01, b02, b12) = (a01 / p, a02 / p, a12 / p);
        let det_b = b00 * b11 * b22 + 2.0 * (b01 * b12 * b02.conj()).re
            - b00 * b12.norm_sqr()
            - b11 * b02.norm_sqr()
            - b22 * b01.norm_sqr();
        let r = (0.5 * det_b).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let hi = q + 2.0 * p * phi.cos();
        let lo = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
        [lo, 3.0 * q - hi - lo, hi]
    };
    // Newton polish on det(λI - A) = λ³ - c2 λ² + c1 λ - c0.
    let c2 = a00 + a11 + a22;
    let c1 = a00 * a11 + a00 * a22 + a11 * a22 - p1;
    let c0 = m.det().re;
    let scale = 1.0 + ev.iter().fold(0.0f64, |s, x| s.max(x.abs()));
    for x in ev.iter_mut() {
        let lam = *x;
        let f = ((lam - c2) * lam + c1) * lam - c0;
        let df = (3.0 * lam - 2.0 * c2) * lam + c1;
        if df.abs() > 1e-6 * scale * scale {
            let step = f / df;
            if step.abs() < 1e-6 * scale {
                *x = lam - step;
            }
        }
    }
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Cyclic complex Jacobi eigen-decomposition of a Hermitian matrix.
///
/// Returns ascending eigenvalues and the unitary whose columns are the
/// matching eigenvectors. Slow and iterative; used for the constant metric
/// square roots and as the independent eigenvalue oracle.
pub fn jacobi_eigen(m: &CMat) -> (Spectrum, CMat) {
    let n = m.n;
    let mut a = m.hermitian_part();
    let mut v = CMat::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.a[p][q].norm_sqr();
            }
        }
        if off.sqrt() <= 1e-17 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let b = a.a[p][q];
                let bn = b.norm();
                if bn <= 1e-300 {
                    continue;
                }
                // Phase shift making the (p,q) entry real and positive, then a
                // real Givens rotation annihilating it.
                let phase = b.conj() / bn;
                let tau = (a.a[q][q].re - a.a[p][p].re) / (2.0 * bn);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let mut u = CMat::identity(n);
                u.a[p][p] = Complex64::new(c, 0.0);
                u.a[p][q] = Complex64::new(s, 0.0);
                u.a[q][p] = -phase * s;
                u.a[q][q] = phase * c;
                a = u.adjoint() * a * u;
                a.a[p][q] = ZERO;
                a.a[q][p] = ZERO;
                v = v * u;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.a[i][i].re.total_cmp(&a.a[j][j].re));
    let mut vals = [0.0; MAX_DIM];
    let mut vecs = CMat::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = a.a[src][src].re;
        for r in 0..n {
            vecs.a[r][dst] = v.a[r][src];
        }
    }
    (vals, vecs)
}

/// f(M) for Hermitian M via its Jacobi decomposition.
pub fn hermitian_function(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = jacobi_eigen(m);
    let n = m.n;
    let mut d = CMat::zeros(n);
    for i in 0..n {
        d.a[i][i] = Complex64::new(f(vals[i]), 0.0);
    }
    vecs * d * vecs.adjoint()
}
