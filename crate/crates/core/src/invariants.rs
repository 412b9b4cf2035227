//! Global invariants and norm diagnostics.
//!
//! Everything here is a pure function of immutable fields. The streaming
//! helpers ([`CurvatureJet`], [`pointwise_summary`]) evaluate pointwise
//! quantities straight from spectral derivative arrays so that large grids
//! never materialize a full matrix field.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt::Write as _;

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    self, stability_coefficient, zeta_pointwise, BundleSpec,
    GeometryError, KahlerData,
};
use crate::grid::{integrate, pairwise_sum, ComplexField, EigenField, GridSpec, HermitianField, RealField};
use crate::linalg::{CMat, MAX_DIM};
use crate::spectral::{Hessian, Spectrum, Torus};

#[derive(Debug, Error, PartialEq)]
pub enum InvariantError {
    #[error("Z_L = 0: the target phase is undefined")]
    ZeroCharge,
    #[error("lifted phase {theta_hat} leaves (-{bound}, {bound}); the data are inconsistent")]
    LiftOutOfRange { theta_hat: f64, bound: f64 },
    #[error("a1 and a2 are only defined on complex surfaces (n = {0})")]
    NotSurface(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A grid of holomorphic covectors (H_1, …, H_n).
#[derive(Clone, Debug)]
pub struct CovectorField {
    grid: GridSpec,
    data: Vec<[Complex64; MAX_DIM]>,
}

impl CovectorField {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn at(&self, p: usize) -> &[Complex64] {
        &self.data[p][..self.grid.dim()]
    }

    /// Component `j` as a complex scalar field.
    pub fn component(&self, j: usize) -> ComplexField {
        ComplexField::from_values(self.grid, self.data.iter().map(|h| h[j]).collect()).expect("same grid")
    }

    pub fn sup_norm(&self) -> f64 {
        let n = self.grid.dim();
        self.data
            .par_iter()
            .map(|h| h[..n].iter().map(|z| z.norm()).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }

    /// max_j ‖H_j − G_j‖_∞.
    pub fn sup_distance(&self, other: &CovectorField) -> f64 {
        let n = self.grid.dim();
        self.data
            .par_iter()
            .zip(other.data.par_iter())
            .map(|(a, b)| (0..n).map(|j| (a[j] - b[j]).norm()).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }
}

/// Z_L = ∫ζ.
pub fn z_invariant(g: &KahlerData, f: &HermitianField) -> Complex64 {
    integrate(&geometry::zeta_field(&geometry::endo_eigenvalues(g, f)))
}

/// Principal arg(Z) moved by a multiple of 2π to the branch nearest `anchor`.
pub fn lift_phase(z: Complex64, anchor: f64, n: usize) -> Result<f64, InvariantError> {
    if z.norm() == 0.0 || !z.is_finite() {
        return Err(InvariantError::ZeroCharge);
    }
    let principal = z.arg();
    let theta_hat = principal + TAU * ((anchor - principal) / TAU).round();
    let bound = n as f64 * FRAC_PI_2;
    if theta_hat.abs() >= bound {
        return Err(InvariantError::LiftOutOfRange { theta_hat, bound });
    }
    Ok(theta_hat)
}

/// θ̂ = arg Z_L on the branch of the spatial mean of θ.
pub fn theta_hat(z: Complex64, theta: &RealField) -> Result<f64, InvariantError> {
    lift_phase(z, integrate(theta), theta.grid().dim())
}

/// V = ∫v.
pub fn volume_functional(v: &RealField) -> f64 {
    integrate(v)
}

/// V − |Z_L|; nonnegative up to quadrature error.
pub fn calibration_bound(volume: f64, z: Complex64) -> f64 {
    volume - z.norm()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseFlags {
    pub supercritical: bool,
    pub hypercritical: bool,
}

pub fn phase_flags_from_min_abs(min_abs_theta: f64, n: usize) -> PhaseFlags {
    PhaseFlags {
        supercritical: min_abs_theta > (n as f64 - 2.0) * FRAC_PI_2,
        hypercritical: min_abs_theta > (n as f64 - 1.0) * FRAC_PI_2,
    }
}

/// Phase conditions evaluated on min_x |θ|.
pub fn phase_flags(theta: &RealField, n: usize) -> PhaseFlags {
    let m = theta.values().par_iter().map(|t| t.abs()).reduce(|| f64::INFINITY, f64::min);
    phase_flags_from_min_abs(m, n)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stability {
    /// θ̂ = 0: decided by the degree-zero Poisson route, always solvable.
    DegreeZero,
    /// Positivity of Ω = c·g + B on the constant representative.
    Checked {
        stable: bool,
        margin: f64,
        coefficient: f64,
        /// The check ran on the dual bundle because θ̂ < 0.
        reflected: bool,
    },
    /// No stability notion applies (n = 1, or n ≥ 3 outside the
    /// supercritical range).
    NotApplicable(String),
}

impl Stability {
    pub fn is_stable(&self) -> Option<bool> {
        match self {
            Stability::DegreeZero => Some(true),
            Stability::Checked { stable, .. } => Some(*stable),
            Stability::NotApplicable(_) => None,
        }
    }

    pub fn margin(&self) -> Option<f64> {
        match self {
            Stability::Checked { margin, .. } => Some(*margin),
            _ => None,
        }
    }
}

/// Threshold below which θ̂ is treated as zero.
pub const DEGREE_ZERO_TOL: f64 = 1e-12;

/// Stability of the class: min eigenvalue of the (c·g + B, g) pencil. For
/// n ≥ 3 this is only a necessary condition.
pub fn stability_check(g: &KahlerData, b: &CMat, theta_hat: f64) -> Stability {
    let n = g.dim();
    if n == 1 {
        return Stability::NotApplicable("no stability condition on curves".into());
    }
    if theta_hat.abs() < DEGREE_ZERO_TOL {
        return Stability::DegreeZero;
    }
    let (b, th, reflected) = if theta_hat < 0.0 {
        (b.scale(-1.0), -theta_hat, true)
    } else {
        (*b, theta_hat, false)
    };
    match stability_coefficient(th, n) {
        Ok(c) => {
            let margin = c + g.pencil_eigenvalues(&b)[0];
            Stability::Checked {
                stable: margin > 0.0,
                margin,
                coefficient: c,
                reflected,
            }
        }
        Err(e) => Stability::NotApplicable(e.to_string()),
    }
}

/// The surface constants computed by two independent routes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceConstants {
    /// ∫ tr(g⁻¹F).
    pub a1: f64,
    /// ∫ det F / det g.
    pub a2: f64,
    /// Im Z_L.
    pub a1_zeta: f64,
    /// 1 − Re Z_L.
    pub a2_zeta: f64,
}

impl SurfaceConstants {
    pub fn route_mismatch(&self) -> f64 {
        (self.a1 - self.a1_zeta).abs().max((self.a2 - self.a2_zeta).abs())
    }

    /// cot θ̂ = (1 − a₂)/a₁.
    pub fn cot_theta_hat(&self) -> Option<f64> {
        (self.a1 != 0.0).then(|| (1.0 - self.a2) / self.a1)
    }
}

/// Surface constants from pointwise traces and determinants of g⁻¹F,
/// cross-checked against Z_L.
pub fn surface_constants_from(
    tr: &RealField,
    det: &RealField,
    z: Complex64,
) -> Result<SurfaceConstants, InvariantError> {
    let n = tr.grid().dim();
    if n != 2 {
        return Err(InvariantError::NotSurface(n));
    }
    Ok(SurfaceConstants {
        a1: integrate(tr),
        a2: integrate(det),
        a1_zeta: z.im,
        a2_zeta: 1.0 - z.re,
    })
}

pub fn surface_constants(g: &KahlerData, f: &HermitianField) -> Result<SurfaceConstants, InvariantError> {
    let gi = *g.inverse();
    let dg = g.matrix().det().re;
    let tr = f.map_scalar(|m| (gi * *m).trace().re);
    let det = f.map_scalar(|m| m.det().re / dg);
    surface_constants_from(&tr, &det, z_invariant(g, f))
}

/// Spectral derivatives of F = B + ∂∂̄φ up to third order, held as raw
/// grid arrays.
pub struct CurvatureJet {
    n: usize,
    b: CMat,
    hess: Hessian,
    third: Option<Vec<Vec<Vec<Vec<Complex64>>>>>,
}

impl CurvatureJet {
    /// F only.
    pub fn curvature(torus: &Torus, spec: &BundleSpec, phi_hat: &Spectrum) -> Self {
        CurvatureJet {
            n: spec.dim(),
            b: spec.b,
            hess: torus.hessian(phi_hat),
            third: None,
        }
    }

    /// F and its first derivatives ∂_l F.
    pub fn with_gradient(torus: &Torus, spec: &BundleSpec, phi_hat: &Spectrum) -> Self {
        CurvatureJet {
            third: Some(torus.third_derivatives(phi_hat)),
            ..Self::curvature(torus, spec, phi_hat)
        }
    }

    #[inline]
    pub fn f_at(&self, p: usize) -> CMat {
        self.hess.at(p) + self.b
    }

    /// ∂_l F at point p (not Hermitian in general).
    #[inline]
    pub fn df_at(&self, p: usize, l: usize) -> CMat {
        let t = self.third.as_ref().expect("jet built without gradient");
        let mut m = CMat::zeros(self.n);
        for j in 0..self.n {
            for k in 0..self.n {
                m[(j, k)] = t[l][j][k][p];
            }
        }
        m
    }

    pub fn has_gradient(&self) -> bool {
        self.third.is_some()
    }
}

/// H_l = tr(η⁻¹ ∂_l F).
#[inline]
pub fn mean_curvature_pointwise(eta_inv: &CMat, df: &[CMat]) -> [Complex64; MAX_DIM] {
    let mut h = [Complex64::new(0.0, 0.0); MAX_DIM];
    for (l, d) in df.iter().enumerate() {
        h[l] = (*eta_inv * *d).trace();
    }
    h
}

/// |H|²_η = Σ conj(H_j) (η⁻¹)_{jk} H_k.
#[inline]
pub fn h_norm_sq_pointwise(h: &[Complex64], eta_inv: &CMat) -> f64 {
    let n = eta_inv.dim();
    let mut s = Complex64::new(0.0, 0.0);
    for j in 0..n {
        for k in 0..n {
            s += h[j].conj() * eta_inv[(j, k)] * h[k];
        }
    }
    s.re.max(0.0)
}

/// |∇F|²_g with every index contracted by g⁻¹.
#[inline]
pub fn grad_f_norm_sq_pointwise(g: &KahlerData, df: &[CMat]) -> f64 {
    let n = g.dim();
    let s = *g.inv_sqrt();
    let sds: Vec<CMat> = df.iter().map(|d| s * *d * s).collect();
    let mut total = 0.0;
    for a in 0..n {
        let mut m = CMat::zeros(n);
        for (l, x) in sds.iter().enumerate() {
            m = m + x.scale_c(s[(a, l)]);
        }
        let f = m.frobenius_norm();
        total += f * f;
    }
    total
}

/// Spectral ∂_l of every entry of a matrix field.
fn entry_gradients(torus: &Torus, f: &HermitianField) -> Vec<Vec<Vec<Vec<Complex64>>>> {
    let n = torus.grid().dim();
    let grid = *f.grid();
    let mut out = vec![vec![vec![Vec::new(); n]; n]; n];
    for j in 0..n {
        for k in 0..n {
            let entry = ComplexField::from_values(grid, f.matrices().iter().map(|m| m[(j, k)]).collect())
                .expect("same grid");
            for (l, slot) in out.iter_mut().enumerate() {
                slot[j][k] = torus.dz_complex(&entry, l).into_values();
            }
        }
    }
    out
}

fn gather(d: &[Vec<Vec<Vec<Complex64>>>], p: usize, n: usize) -> Vec<CMat> {
    (0..n)
        .map(|l| {
            let mut m = CMat::zeros(n);
            for j in 0..n {
                for k in 0..n {
                    m[(j, k)] = d[l][j][k][p];
                }
            }
            m
        })
        .collect()
}

/// H_j = η^{pq̄}∂_j F_{q̄p}, with ∂_j F differentiated spectrally.
pub fn mean_curvature(torus: &Torus, eta_inv: &HermitianField, f: &HermitianField) -> CovectorField {
    let n = torus.grid().dim();
    let d = entry_gradients(torus, f);
    let data = (0..torus.grid().points())
        .into_par_iter()
        .map(|p| mean_curvature_pointwise(eta_inv.at(p), &gather(&d, p, n)))
        .collect();
    CovectorField { grid: *torus.grid(), data }
}

/// ∂_jθ, the other route to H.
pub fn theta_gradient(torus: &Torus, theta: &RealField) -> CovectorField {
    let n = torus.grid().dim();
    let comps: Vec<ComplexField> = (0..n).map(|j| torus.dz_deriv(theta, j)).collect();
    let data = (0..torus.grid().points())
        .into_par_iter()
        .map(|p| {
            let mut h = [Complex64::new(0.0, 0.0); MAX_DIM];
            for (j, c) in comps.iter().enumerate() {
                h[j] = c.values()[p];
            }
            h
        })
        .collect();
    CovectorField { grid: *torus.grid(), data }
}

pub fn h_norm_sq(h: &CovectorField, eta_inv: &HermitianField) -> RealField {
    let data = (0..h.grid.points())
        .into_par_iter()
        .map(|p| h_norm_sq_pointwise(h.at(p), eta_inv.at(p)))
        .collect();
    RealField::from_values(h.grid, data).expect("same grid")
}

pub fn grad_f_norm_sq(torus: &Torus, g: &KahlerData, f: &HermitianField) -> RealField {
    let n = torus.grid().dim();
    let d = entry_gradients(torus, f);
    let data = (0..torus.grid().points())
        .into_par_iter()
        .map(|p| grad_f_norm_sq_pointwise(g, &gather(&d, p, n)))
        .collect();
    RealField::from_values(*torus.grid(), data).expect("same grid")
}

/// Grid extrema and integrals of the pointwise quantities of one potential.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointwiseSummary {
    pub z: Complex64,
    pub volume: f64,
    pub mean_theta: f64,
    pub min_theta: f64,
    pub max_theta: f64,
    pub min_abs_theta: f64,
    pub max_v: f64,
    pub min_lambda: f64,
    pub max_lambda: f64,
}

/// Reduces the eigenvalue, phase and volume-density fields of one
/// potential to the quantities the flow monitors.
pub fn pointwise_summary(lambda: &EigenField, theta: &RealField, v: &RealField) -> PointwiseSummary {
    let pts = lambda.grid().points();
    let zeta: Vec<Complex64> = (0..pts).into_par_iter().map(|p| zeta_pointwise(lambda.at(p))).collect();
    let w = 1.0 / pts as f64;
    let re: Vec<f64> = zeta.par_iter().map(|z| z.re).collect();
    let im: Vec<f64> = zeta.par_iter().map(|z| z.im).collect();
    let th = theta.values();
    let (min_theta, max_theta, min_abs_theta) = th
        .par_iter()
        .map(|&t| (t, t, t.abs()))
        .reduce(
            || (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY),
            |a, b| (a.0.min(b.0), a.1.max(b.1), a.2.min(b.2)),
        );
    PointwiseSummary {
        z: Complex64::new(pairwise_sum(&re) * w, pairwise_sum(&im) * w),
        volume: integrate(v),
        mean_theta: integrate(theta),
        min_theta,
        max_theta,
        min_abs_theta,
        max_v: v.max(),
        min_lambda: lambda.min(),
        max_lambda: lambda.max(),
    }
}

/// Eigenvalues of g⁻¹F at every point of a jet.
pub fn jet_eigenvalues(g: &KahlerData, jet: &CurvatureJet, grid: GridSpec) -> EigenField {
    let spectra = (0..grid.points())
        .into_par_iter()
        .map(|p| g.pencil_eigenvalues(&jet.f_at(p)))
        .collect();
    EigenField::from_spectra(grid, spectra).expect("same grid")
}

/// Everything `invariants` reports about one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantReport {
    pub n: usize,
    pub z: Complex64,
    pub theta_hat: f64,
    pub abs_z: f64,
    pub surface: Option<SurfaceConstants>,
    pub volume: f64,
    pub min_theta: f64,
    pub max_theta: f64,
    pub flags: PhaseFlags,
    pub ample: bool,
    pub stability: Stability,
}

/// Assembles the report for the potential φ on `spec`.
pub fn invariant_report(torus: &Torus, spec: &BundleSpec, phi: &RealField) -> Result<InvariantReport, InvariantError> {
    let n = spec.dim();
    let jet = CurvatureJet::curvature(torus, spec, &torus.forward(phi));
    let grid = *torus.grid();
    let lambda = jet_eigenvalues(&spec.g, &jet, grid);
    let s = pointwise_summary(&lambda, &geometry::theta_field(&lambda), &geometry::vmod_field(&lambda));
    let th = lift_phase(s.z, s.mean_theta, n)?;
    let surface = if n == 2 {
        let gi = *spec.g.inverse();
        let dg = spec.g.matrix().det().re;
        let tr = RealField::from_index_fn(grid, |p| (gi * jet.f_at(p)).trace().re);
        let det = RealField::from_index_fn(grid, |p| jet.f_at(p).det().re / dg);
        Some(surface_constants_from(&tr, &det, s.z)?)
    } else {
        None
    };
    Ok(InvariantReport {
        n,
        z: s.z,
        theta_hat: th,
        abs_z: s.z.norm(),
        surface,
        volume: s.volume,
        min_theta: s.min_theta,
        max_theta: s.max_theta,
        flags: phase_flags_from_min_abs(s.min_abs_theta, n),
        ample: spec.is_ample(),
        stability: stability_check(&spec.g, &spec.b, th),
    })
}

impl InvariantReport {
    /// Flat `key = value` block, one entry per line.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("n", self.n.to_string());
        put("z_re", fmt_f(self.z.re));
        put("z_im", fmt_f(self.z.im));
        put("abs_z", fmt_f(self.abs_z));
        put("theta_hat", fmt_f(self.theta_hat));
        put("volume", fmt_f(self.volume));
        put("calibration_gap", fmt_f(self.volume - self.abs_z));
        put("min_theta", fmt_f(self.min_theta));
        put("max_theta", fmt_f(self.max_theta));
        put("supercritical", self.flags.supercritical.to_string());
        put("hypercritical", self.flags.hypercritical.to_string());
        put("ample", self.ample.to_string());
        if let Some(sc) = &self.surface {
            put("a1", fmt_f(sc.a1));
            put("a2", fmt_f(sc.a2));
            put("a1_zeta", fmt_f(sc.a1_zeta));
            put("a2_zeta", fmt_f(sc.a2_zeta));
            put("degree_zero", (sc.a1.abs() < DEGREE_ZERO_TOL).to_string());
        }
        match &self.stability {
            Stability::DegreeZero => {
                put("stable", "true".into());
                put("stability_note", "degree zero".into());
            }
            Stability::Checked {
                stable,
                margin,
                coefficient,
                reflected,
            } => {
                put("stable", stable.to_string());
                put("stability_margin", fmt_f(*margin));
                put("stability_coefficient", fmt_f(*coefficient));
                put("reflected", reflected.to_string());
            }
            Stability::NotApplicable(why) => put("stability_note", why.clone()),
        }
        s
    }
}

/// Shortest round-trip representation.
pub fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

/// Parses a flat `key = value` block into ordered pairs.
pub fn parse_key_value(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// θ̂ of a constant-curvature class, for quick checks.
pub fn constant_theta_hat(g: &KahlerData, b: &CMat) -> Result<f64, InvariantError> {
    let lam = g.pencil_eigenvalues(b);
    let n = g.dim();
    let z = zeta_pointwise(&lam[..n]);
    lift_phase(z, geometry::theta_pointwise(&lam[..n]), n)
}
