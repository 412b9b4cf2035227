//! The discrete flat torus and the containers for fields sampled on it.
//!
//! Coordinates are `x^1, y^1, ..., x^n, y^n` in `[0, 1)`, with
//! `z^j = x^j + i y^j`. Real axis `2j` carries `x^{j+1}` and axis `2j + 1`
//! carries `y^{j+1}`; storage is row-major with the last axis contiguous.

use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{CMat, Spectrum, MAX_DIM};

/// Default refusal threshold for the total number of grid points.
pub const DEFAULT_POINT_BUDGET: usize = 30_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("complex dimension n = {0} outside 1..=3")]
    Dimension(usize),
    #[error("N must be even and at least 8 (got {0})")]
    Resolution(usize),
    #[error("grid of {points} points exceeds the budget of {budget}")]
    Budget { points: usize, budget: usize },
    #[error("bandwidth {bandwidth} must be below N/2 = {half}")]
    Bandwidth { bandwidth: usize, half: usize },
    #[error("source has nonzero mean {mean:e}; the torus Laplacian only reaches mean-zero data")]
    Compatibility { mean: f64 },
    #[error("field lives on a different grid")]
    Mismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSpec {
    n: usize,
    size: usize,
    points: usize,
}

impl GridSpec {
    pub fn new(n: usize, size: usize) -> Result<Self, GridError> {
        Self::with_budget(n, size, DEFAULT_POINT_BUDGET)
    }

    pub fn with_budget(n: usize, size: usize, budget: usize) -> Result<Self, GridError> {
        if !(1..=MAX_DIM).contains(&n) {
            return Err(GridError::Dimension(n));
        }
        if size < 8 || size % 2 != 0 {
            return Err(GridError::Resolution(size));
        }
        let points = (size as u128).pow(2 * n as u32);
        if points > budget as u128 {
            return Err(GridError::Budget {
                points: points.min(usize::MAX as u128) as usize,
                budget,
            });
        }
        Ok(GridSpec {
            n,
            size,
            points: points as usize,
        })
    }

    /// Complex dimension n.
    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Samples per real axis, N.
    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn real_axes(&self) -> usize {
        2 * self.n
    }

    #[inline]
    pub fn points(&self) -> usize {
        self.points
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        1.0 / self.size as f64
    }

    /// Row-major stride of a real axis.
    pub fn stride(&self, axis: usize) -> usize {
        self.size.pow((self.real_axes() - 1 - axis) as u32)
    }

    /// Per-axis integer indices of a flat point index.
    pub fn digits(&self, mut p: usize) -> [usize; 2 * MAX_DIM] {
        let mut d = [0; 2 * MAX_DIM];
        for axis in (0..self.real_axes()).rev() {
            d[axis] = p % self.size;
            p /= self.size;
        }
        d
    }

    /// Flat index of a multi-index, wrapping each component periodically.
    pub fn wrap_index(&self, idx: &[i64]) -> usize {
        debug_assert_eq!(idx.len(), self.real_axes());
        let m = self.size as i64;
        idx.iter()
            .fold(0usize, |acc, &i| acc * self.size + i.rem_euclid(m) as usize)
    }

    /// Coordinates in `[0, 1)` of a point, axis order `x^1, y^1, x^2, ...`.
    pub fn coords(&self, p: usize) -> [f64; 2 * MAX_DIM] {
        let d = self.digits(p);
        let mut c = [0.0; 2 * MAX_DIM];
        for axis in 0..self.real_axes() {
            c[axis] = d[axis] as f64 * self.dx();
        }
        c
    }

    /// Rough working-set estimate for one complex field, in bytes.
    pub fn complex_field_bytes(&self) -> usize {
        self.points * std::mem::size_of::<Complex64>()
    }
}

/// A scalar field on the torus grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    grid: GridSpec,
    values: Vec<T>,
}

pub type RealField = Field<f64>;
pub type ComplexField = Field<Complex64>;

impl<T: Copy + Send + Sync> Field<T> {
    pub fn from_values(grid: GridSpec, values: Vec<T>) -> Result<Self, GridError> {
        if values.len() != grid.points() {
            return Err(GridError::Mismatch);
        }
        Ok(Field { grid, values })
    }

    pub fn filled(grid: GridSpec, value: T) -> Self {
        Field {
            grid,
            values: vec![value; grid.points()],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> T + Sync) -> Self {
        use rayon::prelude::*;
        let axes = grid.real_axes();
        let values = (0..grid.points())
            .into_par_iter()
            .map(|p| f(&grid.coords(p)[..axes]))
            .collect();
        Field { grid, values }
    }

    /// Field built from the flat point index.
    pub fn from_index_fn(grid: GridSpec, f: impl Fn(usize) -> T + Sync + Send) -> Self {
        use rayon::prelude::*;
        let values = (0..grid.points()).into_par_iter().map(f).collect();
        Field { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn map<U: Copy + Send + Sync>(&self, f: impl Fn(T) -> U + Sync + Send) -> Field<U> {
        use rayon::prelude::*;
        Field {
            grid: self.grid,
            values: self.values.par_iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map<U: Copy + Send + Sync, V: Copy + Send + Sync>(
        &self,
        other: &Field<U>,
        f: impl Fn(T, U) -> V + Sync + Send,
    ) -> Field<V> {
        use rayon::prelude::*;
        assert_eq!(self.grid, other.grid, "fields on different grids");
        Field {
            grid: self.grid,
            values: self
                .values
                .par_iter()
                .zip(other.values.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

impl RealField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// Copy with the grid mean subtracted.
    pub fn mean_removed(&self) -> Self {
        let m = integrate(self);
        self.map(|x| x - m)
    }

    pub fn add_scaled(&self, other: &RealField, s: f64) -> Self {
        self.zip_map(other, |a, b| a + s * b)
    }

    /// sup |a - b|.
    pub fn sup_distance(&self, other: &RealField) -> f64 {
        assert_eq!(self.grid, other.grid);
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl ComplexField {
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, x| m.max(x.norm()))
    }

    pub fn re(&self) -> RealField {
        self.map(|z| z.re)
    }
}

/// Sum with a fixed pairwise tree; the grouping depends only on the length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 128;
    if xs.len() <= LEAF {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

fn pairwise_sum_c(xs: &[Complex64]) -> Complex64 {
    const LEAF: usize = 128;
    if xs.len() <= LEAF {
        let mut s = Complex64::new(0.0, 0.0);
        for &x in xs {
            s += x;
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum_c(&xs[..mid]) + pairwise_sum_c(&xs[mid..])
    }
}

/// Quadrature type for [`integrate`].
pub trait Integrable: Sized {
    type Output;
    fn grid_mean(values: &[Self]) -> Self::Output;
}

impl Integrable for f64 {
    type Output = f64;
    fn grid_mean(values: &[f64]) -> f64 {
        pairwise_sum(values) / values.len() as f64
    }
}

impl Integrable for Complex64 {
    type Output = Complex64;
    fn grid_mean(values: &[Complex64]) -> Complex64 {
        pairwise_sum_c(values) / values.len() as f64
    }
}

/// Integral over the unit-volume torus: the uniform grid mean.
pub fn integrate<T: Integrable + Copy + Send + Sync>(f: &Field<T>) -> T::Output {
    T::grid_mean(f.values())
}

/// A field of n x n Hermitian matrices, one per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianField {
    grid: GridSpec,
    data: Vec<CMat>,
}

impl HermitianField {
    pub fn constant(grid: GridSpec, m: CMat) -> Self {
        assert_eq!(m.dim(), grid.dim());
        HermitianField {
            grid,
            data: vec![m; grid.points()],
        }
    }

    pub fn from_matrices(grid: GridSpec, data: Vec<CMat>) -> Result<Self, GridError> {
        if data.len() != grid.points() || data.iter().any(|m| m.dim() != grid.dim()) {
            return Err(GridError::Mismatch);
        }
        Ok(HermitianField { grid, data })
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn at(&self, p: usize) -> &CMat {
        &self.data[p]
    }

    #[inline]
    pub fn matrices(&self) -> &[CMat] {
        &self.data
    }

    /// Pointwise map producing a new matrix field.
    pub fn map(&self, f: impl Fn(&CMat) -> CMat + Sync + Send) -> HermitianField {
        use rayon::prelude::*;
        HermitianField {
            grid: self.grid,
            data: self.data.par_iter().map(f).collect(),
        }
    }

    /// Pointwise map to a scalar field.
    pub fn map_scalar<T: Copy + Send + Sync>(&self, f: impl Fn(&CMat) -> T + Sync + Send) -> Field<T> {
        use rayon::prelude::*;
        Field {
            grid: self.grid,
            values: self.data.par_iter().map(f).collect(),
        }
    }

    /// Grid mean of entry (j, k).
    pub fn entry_mean(&self, j: usize, k: usize) -> Complex64 {
        let vals: Vec<Complex64> = self.data.iter().map(|m| m[(j, k)]).collect();
        Complex64::grid_mean(&vals)
    }

    pub fn max_hermitian_defect(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, a| m.max(a.hermitian_defect()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, a| m.max(a.max_abs()))
    }
}

/// Sorted real eigenvalues λ_1 ≤ … ≤ λ_n at every grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenField {
    grid: GridSpec,
    data: Vec<Spectrum>,
}

impl EigenField {
    pub fn from_spectra(grid: GridSpec, data: Vec<Spectrum>) -> Result<Self, GridError> {
        if data.len() != grid.points() {
            return Err(GridError::Mismatch);
        }
        Ok(EigenField { grid, data })
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// The n eigenvalues at point p.
    #[inline]
    pub fn at(&self, p: usize) -> &[f64] {
        &self.data[p][..self.grid.dim()]
    }

    pub fn map_scalar<T: Copy + Send + Sync>(&self, f: impl Fn(&[f64]) -> T + Sync + Send) -> Field<T> {
        use rayon::prelude::*;
        let n = self.grid.dim();
        Field {
            grid: self.grid,
            values: self.data.par_iter().map(|s| f(&s[..n])).collect(),
        }
    }

    /// Smallest eigenvalue over the grid.
    pub fn min(&self) -> f64 {
        self.data.iter().map(|s| s[0]).fold(f64::INFINITY, f64::min)
    }

    /// Largest eigenvalue over the grid.
    pub fn max(&self) -> f64 {
        let top = self.grid.dim() - 1;
        self.data.iter().map(|s| s[top]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// min over the grid of min_j |λ_j|.
    pub fn min_abs(&self) -> f64 {
        let n = self.grid.dim();
        self.data
            .iter()
            .flat_map(|s| s[..n].iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_counts() {
        let g = GridSpec::new(1, 8).unwrap();
        assert_eq!(g.points(), 64);
        assert_eq!(g.dx(), 0.125);
        let g = GridSpec::new(2, 32).unwrap();
        assert_eq!(g.points(), 1_048_576);
    }

    #[test]
    fn rejects_bad_grids() {
        assert_eq!(GridSpec::new(2, 7), Err(GridError::Resolution(7)));
        assert_eq!(GridSpec::new(2, 6), Err(GridError::Resolution(6)));
        assert_eq!(GridSpec::new(0, 8), Err(GridError::Dimension(0)));
        assert_eq!(GridSpec::new(4, 8), Err(GridError::Dimension(4)));
        assert!(matches!(GridSpec::new(3, 64), Err(GridError::Budget { .. })));
        assert!(matches!(
            GridSpec::with_budget(2, 16, 1000),
            Err(GridError::Budget { points: 65536, budget: 1000 })
        ));
    }

    #[test]
    fn periodic_indexing_wraps() {
        let g = GridSpec::new(1, 8).unwrap();
        assert_eq!(g.wrap_index(&[0, 0]), 0);
        assert_eq!(g.wrap_index(&[8, -1]), 7);
        assert_eq!(g.wrap_index(&[-1, 9]), 7 * 8 + 1);
        let p = g.wrap_index(&[3, 5]);
        assert_eq!(&g.digits(p)[..2], &[3, 5]);
        assert_eq!(&g.coords(p)[..2], &[0.375, 0.625]);
    }

    #[test]
    fn integrate_constants_and_symmetric_functions() {
        let g = GridSpec::new(1, 16).unwrap();
        assert_eq!(integrate(&RealField::filled(g, 1.0)), 1.0);
        let s = RealField::from_fn(g, |x| (2.0 * std::f64::consts::PI * x[0]).sin());
        assert!(integrate(&s).abs() < 1e-16);
        let z = ComplexField::filled(g, Complex64::new(-8.0, 6.0));
        assert_eq!(integrate(&z), Complex64::new(-8.0, 6.0));
    }

    #[test]
    fn pairwise_sum_is_order_fixed() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(pairwise_sum(&xs).to_bits(), pairwise_sum(&xs.clone()).to_bits());
        let naive: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - naive).abs() < 1e-10);
    }
}
