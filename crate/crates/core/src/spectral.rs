//! Fourier-multiplier calculus on the discrete torus.
//!
//! Convention: `∂/∂z^j = ½(∂/∂x^j − i ∂/∂y^j)` and
//! `∂/∂z̄^j = ½(∂/∂x^j + i ∂/∂y^j)`. The Nyquist wavenumber is treated as
//! zero in every derivative symbol, and all higher derivatives are products
//! of the first-order symbols, so `ddbar` is exactly `dz ∘ dzbar` on the grid.

use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::grid::{integrate, ComplexField, GridError, GridSpec, HermitianField, RealField};
use crate::linalg::{CMat, MAX_DIM};

/// Mean-zero tolerance accepted by [`Torus::poisson_solve`].
pub const POISSON_MEAN_TOL: f64 = 1e-10;

const ROW_BATCH: usize = 512;

/// FFT plans and wavenumbers for one grid.
pub struct Torus {
    grid: GridSpec,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    wavenumber: Vec<f64>,
    scratch: Mutex<Vec<Complex64>>,
}

impl std::fmt::Debug for Torus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Torus").field("grid", &self.grid).finish()
    }
}

/// A spectrum in the same row-major layout as the physical grid.
pub type Spectrum = Vec<Complex64>;

impl Torus {
    pub fn new(grid: GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        let n = grid.size();
        let half = (n / 2) as i64;
        let wavenumber = (0..n as i64)
            .map(|i| {
                let k = if i < half { i } else { i - n as i64 };
                if k == -half {
                    0.0
                } else {
                    k as f64
                }
            })
            .collect();
        Torus {
            grid,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            wavenumber,
            scratch: Mutex::new(Vec::new()),
        }
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Forward transform of a real field (unnormalized).
    pub fn forward(&self, f: &RealField) -> Spectrum {
        assert_eq!(f.grid(), &self.grid);
        let mut data: Vec<Complex64> = f.values().par_iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.transform(&mut data, &self.fwd);
        data
    }

    pub fn forward_complex(&self, f: &ComplexField) -> Spectrum {
        assert_eq!(f.grid(), &self.grid);
        let mut data = f.values().to_vec();
        self.transform(&mut data, &self.fwd);
        data
    }

    /// Inverse transform including the 1/N^(2n) normalization.
    pub fn inverse(&self, mut spec: Spectrum) -> Vec<Complex64> {
        self.transform(&mut spec, &self.inv);
        let s = 1.0 / self.grid.points() as f64;
        spec.par_iter_mut().for_each(|z| *z *= s);
        spec
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&self, spec: Spectrum) -> RealField {
        let vals = self.inverse(spec).into_par_iter().map(|z| z.re).collect();
        RealField::from_values(self.grid, vals).expect("grid size")
    }

    /// Full multi-dimensional transform: FFT the contiguous axis, then rotate
    /// that axis to the front; after 2n rounds every axis is transformed and
    /// the original layout is restored.
    fn transform(&self, data: &mut Vec<Complex64>, plan: &Arc<dyn Fft<f64>>) {
        let n = self.grid.size();
        // Reuse the transpose buffer unless another caller holds it.
        let mut guard = self.scratch.try_lock().ok();
        let mut local = Vec::new();
        let buf: &mut Vec<Complex64> = match guard.as_deref_mut() {
            Some(b) => b,
            None => &mut local,
        };
        buf.resize(data.len(), Complex64::new(0.0, 0.0));
        for _ in 0..self.grid.real_axes() {
            data.par_chunks_mut(n * ROW_BATCH).for_each_init(
                || vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()],
                |scratch, chunk| plan.process_with_scratch(chunk, scratch),
            );
            rotate_last_axis_to_front(data, buf, n);
            std::mem::swap(data, buf);
        }
    }

    /// Effective integer wavenumbers of flat spectral index `p`.
    #[inline]
    pub fn mode(&self, p: usize) -> [f64; 2 * MAX_DIM] {
        let d = self.grid.digits(p);
        let mut k = [0.0; 2 * MAX_DIM];
        for axis in 0..self.grid.real_axes() {
            k[axis] = self.wavenumber[d[axis]];
        }
        k
    }

    /// Symbol of ∂/∂z^j on a mode: π(q_j + i p_j).
    #[inline]
    pub fn dz_symbol(k: &[f64], j: usize) -> Complex64 {
        Complex64::new(PI * k[2 * j + 1], PI * k[2 * j])
    }

    /// Symbol of ∂/∂z̄^j on a mode: π(−q_j + i p_j).
    #[inline]
    pub fn dzbar_symbol(k: &[f64], j: usize) -> Complex64 {
        Complex64::new(-PI * k[2 * j + 1], PI * k[2 * j])
    }

    fn multiply(&self, spec: &Spectrum, sym: impl Fn(&[f64]) -> Complex64 + Sync) -> Spectrum {
        let mut out = vec![Complex64::new(0.0, 0.0); spec.len()];
        self.for_each_mode(&mut out, |k, o, p| *o = spec[p] * sym(k));
        out
    }

    /// Visits every spectral index with its wavenumbers, decoding the
    /// multi-index once per contiguous row.
    pub fn for_each_mode<T: Send>(&self, out: &mut [T], f: impl Fn(&[f64], &mut T, usize) + Sync) {
        let n = self.grid.size();
        let axes = self.grid.real_axes();
        assert_eq!(out.len(), self.grid.points());
        out.par_chunks_mut(n).enumerate().for_each(|(row, chunk)| {
            let mut k = self.mode(row * n);
            for (i, o) in chunk.iter_mut().enumerate() {
                k[axes - 1] = self.wavenumber[i];
                f(&k[..axes], o, row * n + i);
            }
        });
    }

    /// True for spectral indices carrying the Nyquist frequency on some axis.
    /// Every derivative symbol treats that frequency as zero.
    pub fn nyquist_mask(&self) -> Vec<bool> {
        let half = self.grid.size() / 2;
        (0..self.grid.points())
            .into_par_iter()
            .map(|p| self.grid.digits(p)[..self.grid.real_axes()].contains(&half))
            .collect()
    }

    pub fn dz_deriv(&self, f: &RealField, j: usize) -> ComplexField {
        assert!(j < self.grid.dim(), "axis {j} out of range");
        let spec = self.multiply(&self.forward(f), |k| Self::dz_symbol(k, j));
        ComplexField::from_values(self.grid, self.inverse(spec)).expect("grid size")
    }

    pub fn dzbar_deriv(&self, f: &RealField, j: usize) -> ComplexField {
        assert!(j < self.grid.dim(), "axis {j} out of range");
        let spec = self.multiply(&self.forward(f), |k| Self::dzbar_symbol(k, j));
        ComplexField::from_values(self.grid, self.inverse(spec)).expect("grid size")
    }

    /// ∂/∂z^j of a complex field.
    pub fn dz_complex(&self, f: &ComplexField, j: usize) -> ComplexField {
        assert!(j < self.grid.dim(), "axis {j} out of range");
        let spec = self.multiply(&self.forward_complex(f), |k| Self::dz_symbol(k, j));
        ComplexField::from_values(self.grid, self.inverse(spec)).expect("grid size")
    }

    /// The complex Hessian ∂_j∂_k̄φ from a precomputed spectrum.
    pub fn hessian(&self, spec: &Spectrum) -> Hessian {
        let n = self.grid.dim();
        let norm = 1.0 / self.grid.points() as f64;
        // Diagonal entries are real fields: pack two per inverse transform.
        let mut diag = Vec::with_capacity(n.div_ceil(2));
        for j in (0..n).step_by(2) {
            let j2 = j + 1;
            let mut packed = self.multiply(spec, |k| {
                let a = Self::dz_symbol(k, j) * Self::dzbar_symbol(k, j);
                let a = if j2 < n {
                    a + Complex64::i() * (Self::dz_symbol(k, j2) * Self::dzbar_symbol(k, j2))
                } else {
                    a
                };
                a * norm
            });
            self.transform(&mut packed, &self.inv);
            diag.push(packed);
        }
        let mut off = Vec::with_capacity(n * (n - 1) / 2);
        for j in 0..n {
            for k in (j + 1)..n {
                let mut s = self.multiply(spec, |m| Self::dz_symbol(m, j) * Self::dzbar_symbol(m, k) * norm);
                self.transform(&mut s, &self.inv);
                off.push(s);
            }
        }
        Hessian { n, diag, off }
    }

    /// The complex Hessian ∂_j∂_k̄φ as a Hermitian matrix field.
    pub fn ddbar(&self, phi: &RealField) -> HermitianField {
        let h = self.hessian(&self.forward(phi));
        let data = (0..self.grid.points()).into_par_iter().map(|p| h.at(p)).collect();
        HermitianField::from_matrices(self.grid, data).expect("grid size")
    }

    /// Third derivatives T[l][j][k] = ∂_l ∂_j ∂_k̄ φ, for l, j, k < n.
    pub fn third_derivatives(&self, spec: &Spectrum) -> Vec<Vec<Vec<Vec<Complex64>>>> {
        let n = self.grid.dim();
        let norm = 1.0 / self.grid.points() as f64;
        let mut t = vec![vec![vec![Vec::new(); n]; n]; n];
        for l in 0..n {
            for j in l..n {
                for k in 0..n {
                    let mut s = self.multiply(spec, |m| {
                        Self::dz_symbol(m, l) * Self::dz_symbol(m, j) * Self::dzbar_symbol(m, k) * norm
                    });
                    self.transform(&mut s, &self.inv);
                    t[l][j][k] = s;
                }
            }
        }
        for l in 0..n {
            for j in 0..l {
                t[l][j] = t[j][l].clone();
            }
        }
        t
    }

    /// Symbol of the constant-coefficient Laplacian g^{jk̄}∂_j∂_k̄ on a mode.
    /// Always real and non-positive.
    pub fn laplacian_symbol(&self, k: &[f64], g_inv: &CMat) -> f64 {
        let n = self.grid.dim();
        let mut s = Complex64::new(0.0, 0.0);
        for j in 0..n {
            for l in 0..n {
                s += g_inv[(l, j)] * Self::dz_symbol(k, j) * Self::dzbar_symbol(k, l);
            }
        }
        s.re
    }

    /// Laplacian symbols for every spectral index.
    pub fn laplacian_symbols(&self, g_inv: &CMat) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.points()];
        self.for_each_mode(&mut out, |k, o, _| *o = self.laplacian_symbol(k, g_inv));
        out
    }

    /// Applies a real Fourier multiplier to a real field.
    pub fn apply_real_multiplier(&self, f: &RealField, symbol: &[f64]) -> RealField {
        let mut spec = self.forward(f);
        spec.par_iter_mut().zip(symbol.par_iter()).for_each(|(c, &s)| *c *= s);
        self.inverse_real(spec)
    }

    /// g^{jk̄}∂_j∂_k̄ u.
    pub fn laplacian(&self, u: &RealField, g_inv: &CMat) -> RealField {
        self.apply_real_multiplier(u, &self.laplacian_symbols(g_inv))
    }

    /// Solves g^{jk̄}∂_j∂_k̄ u = ρ for mean-zero u.
    pub fn poisson_solve(&self, rho: &RealField, g_inv: &CMat) -> Result<RealField, GridError> {
        let mean = integrate(rho);
        if mean.abs() > POISSON_MEAN_TOL {
            return Err(GridError::Compatibility { mean });
        }
        let mut spec = self.forward(rho);
        self.for_each_mode(&mut spec, |k, c, _| {
            let s = self.laplacian_symbol(k, g_inv);
            if s.abs() < 1e-300 {
                *c = Complex64::new(0.0, 0.0);
            } else {
                *c /= s;
            }
        });
        Ok(self.inverse_real(spec))
    }

    /// Deterministic real, mean-zero trigonometric polynomial with integer
    /// frequencies |m_a| ≤ `bandwidth` on every real axis, rescaled so its
    /// grid sup-norm equals `amplitude`.
    ///
    /// Coefficients are drawn from a ChaCha8 stream in a grid-independent
    /// order and damped by (1 + |m|²)^{-2}, so the same seed describes the
    /// same function at every resolution.
    pub fn random_band_limited(&self, seed: u64, bandwidth: usize, amplitude: f64) -> Result<RealField, GridError> {
        let half = self.grid.size() / 2;
        if bandwidth >= half {
            return Err(GridError::Bandwidth { bandwidth, half });
        }
        if amplitude == 0.0 || bandwidth == 0 {
            return Ok(RealField::zeros(self.grid));
        }
        let axes = self.grid.real_axes();
        let n = self.grid.size();
        let bw = bandwidth as i64;
        let side = 2 * bandwidth + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = vec![Complex64::new(0.0, 0.0); self.grid.points()];
        let total = side.pow(axes as u32);
        let mut m = [0i64; 2 * MAX_DIM];
        for code in 0..total {
            let mut c = code;
            for axis in (0..axes).rev() {
                m[axis] = (c % side) as i64 - bw;
                c /= side;
            }
            let re: f64 = rng.gen_range(-1.0..1.0);
            let im: f64 = rng.gen_range(-1.0..1.0);
            let ms = &m[..axes];
            // Keep one representative of each ±m pair: the first nonzero
            // component must be positive.
            let lead = ms.iter().copied().find(|&x| x != 0);
            if lead.map_or(true, |x| x < 0) {
                continue;
            }
            let k2: i64 = ms.iter().map(|x| x * x).sum();
            let w = 1.0 / (1.0 + k2 as f64).powi(2);
            let coeff = Complex64::new(re, im) * w;
            let idx = |sign: i64| {
                ms.iter()
                    .fold(0usize, |acc, &x| acc * n + (sign * x).rem_euclid(n as i64) as usize)
            };
            spec[idx(1)] += coeff;
            spec[idx(-1)] += coeff.conj();
        }
        let field = self.inverse_real(spec);
        let sup = field.sup_norm();
        let s = amplitude / sup;
        Ok(field.map(|x| x * s))
    }
}

/// Transposes an (R x n) row-major block into (n x R).
fn rotate_last_axis_to_front(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    const BLOCK: usize = 64;
    let rows = src.len() / n;
    if rows % BLOCK != 0 {
        dst.par_chunks_mut(rows).enumerate().for_each(|(c, out)| {
            for (r, o) in out.iter_mut().enumerate() {
                *o = src[r * n + c];
            }
        });
        return;
    }
    // Each task owns a BLOCK-row stripe of every output row.
    let stripes = rows / BLOCK;
    let ptr = SyncPtr(dst.as_mut_ptr());
    (0..stripes).into_par_iter().for_each(|s| {
        let r0 = s * BLOCK;
        let p = &ptr;
        for c in 0..n {
            for i in 0..BLOCK {
                // SAFETY: stripes write disjoint index ranges
                // [c*rows + r0, c*rows + r0 + BLOCK) of `dst`.
                unsafe { *p.0.add(c * rows + r0 + i) = src[(r0 + i) * n + c] };
            }
        }
    });
}

struct SyncPtr(*mut Complex64);
unsafe impl Sync for SyncPtr {}

/// Complex Hessian ∂_j∂_k̄φ stored as raw grid arrays: diagonal entries
/// packed pairwise into the real and imaginary parts, upper off-diagonal
/// entries in row order.
pub struct Hessian {
    n: usize,
    diag: Vec<Vec<Complex64>>,
    off: Vec<Vec<Complex64>>,
}

impl Hessian {
    /// The Hermitian matrix at grid point `p`.
    #[inline]
    pub fn at(&self, p: usize) -> CMat {
        let n = self.n;
        let mut m = CMat::zeros(n);
        for j in 0..n {
            let z = self.diag[j / 2][p];
            m[(j, j)] = Complex64::new(if j % 2 == 0 { z.re } else { z.im }, 0.0);
        }
        let mut e = 0;
        for j in 0..n {
            for k in (j + 1)..n {
                let z = self.off[e][p];
                m[(j, k)] = z;
                m[(k, j)] = z.conj();
                e += 1;
            }
        }
        m
    }
}
