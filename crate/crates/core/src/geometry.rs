//! Pointwise Hermitian geometry of a line bundle over a flat torus.
//!
//! Matrix convention: entry (j, k) of `g`, `F`, `η` or a Hessian is the
//! coefficient of `dz^j ∧ dz̄^k`, so `F_{jk} = ∂_j∂_k̄ φ + B_{jk}`. The
//! endomorphism is `K = g⁻¹F`; every spectral computation goes through the
//! Hermitian similarity `g^{-1/2} F g^{-1/2}`.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{ComplexField, EigenField, HermitianField, RealField};
use crate::linalg::{hermitian_eigenvalues, hermitian_function, CMat, Spectrum};
use crate::spectral::Torus;

/// Condition number above which a pointwise η inversion is flagged.
pub const ETA_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("metric is not Hermitian (defect {0:e})")]
    MetricNotHermitian(f64),
    #[error("metric is not positive definite (smallest eigenvalue {0:e})")]
    MetricNotPositive(f64),
    #[error("curvature class B is not Hermitian: entries ({0},{1}) and ({1},{0}) are not conjugate")]
    CurvatureNotHermitian(usize, usize),
    #[error("dimension mismatch: metric is {metric}x{metric}, class is {class}x{class}")]
    DimensionMismatch { metric: usize, class: usize },
    #[error("η is numerically singular at point {point} (condition {condition:e})")]
    EtaIllConditioned { point: usize, condition: f64 },
    #[error("θ̂ = {0} sits on a cotangent pole; use the degree-zero route")]
    CotangentPole(f64),
    #[error("supercritical form requires θ̂ > (n-2)π/2 = {bound} (got {theta_hat})")]
    NotSupercritical { theta_hat: f64, bound: f64 },
}

/// A constant Kähler metric on the torus together with its square roots.
#[derive(Clone, Debug, PartialEq)]
pub struct KahlerData {
    g: CMat,
    g_inv: CMat,
    g_inv_sqrt: CMat,
    identity: bool,
}

impl KahlerData {
    pub fn new(g: CMat) -> Result<Self, GeometryError> {
        let defect = g.hermitian_defect();
        if defect > 1e-12 * (1.0 + g.frobenius_norm()) {
            return Err(GeometryError::MetricNotHermitian(defect));
        }
        let g = g.hermitian_part();
        let (vals, _) = crate::linalg::jacobi_eigen(&g);
        if vals[0] <= 0.0 {
            return Err(GeometryError::MetricNotPositive(vals[0]));
        }
        let n = g.dim();
        let identity = g == CMat::identity(n);
        let g_inv_sqrt = if identity {
            CMat::identity(n)
        } else {
            hermitian_function(&g, |x| 1.0 / x.sqrt())
        };
        let g_inv = if identity {
            CMat::identity(n)
        } else {
            g.inverse().ok_or(GeometryError::MetricNotPositive(vals[0]))?
        };
        Ok(KahlerData {
            g,
            g_inv,
            g_inv_sqrt,
            identity,
        })
    }

    /// The standard flat metric g = I.
    pub fn flat(n: usize) -> Self {
        Self::new(CMat::identity(n)).expect("identity is a metric")
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.g.dim()
    }

    #[inline]
    pub fn matrix(&self) -> &CMat {
        &self.g
    }

    #[inline]
    pub fn inverse(&self) -> &CMat {
        &self.g_inv
    }

    #[inline]
    pub fn inv_sqrt(&self) -> &CMat {
        &self.g_inv_sqrt
    }

    /// Hermitian representative g^{-1/2} M g^{-1/2} of g⁻¹M.
    #[inline]
    pub fn pencil(&self, m: &CMat) -> CMat {
        if self.identity {
            *m
        } else {
            (self.g_inv_sqrt * *m * self.g_inv_sqrt).hermitian_part()
        }
    }

    /// Sorted eigenvalues of g⁻¹M for Hermitian M.
    #[inline]
    pub fn pencil_eigenvalues(&self, m: &CMat) -> Spectrum {
        hermitian_eigenvalues(&self.pencil(m))
    }

    /// Smallest eigenvalue of g itself.
    pub fn min_eigenvalue(&self) -> f64 {
        crate::linalg::jacobi_eigen(&self.g).0[0]
    }
}

/// Line bundle data: the constant curvature B of the background metric h₀
/// over a flat torus with metric g.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleSpec {
    pub g: KahlerData,
    pub b: CMat,
}

impl BundleSpec {
    pub fn new(g: KahlerData, b: CMat) -> Result<Self, GeometryError> {
        if g.dim() != b.dim() {
            return Err(GeometryError::DimensionMismatch {
                metric: g.dim(),
                class: b.dim(),
            });
        }
        let tol = 1e-12 * (1.0 + b.frobenius_norm());
        for j in 0..b.dim() {
            for k in j..b.dim() {
                if (b[(j, k)] - b[(k, j)].conj()).norm() > tol {
                    return Err(GeometryError::CurvatureNotHermitian(j, k));
                }
            }
        }
        Ok(BundleSpec {
            g,
            b: b.hermitian_part(),
        })
    }

    /// Flat metric with diagonal curvature class.
    pub fn flat_diagonal(b: &[f64]) -> Self {
        Self::new(KahlerData::flat(b.len()), CMat::from_real_diag(b)).expect("valid diagonal data")
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.b.dim()
    }

    /// Positive line bundle: g⁻¹B positive definite.
    pub fn is_ample(&self) -> bool {
        self.g.pencil_eigenvalues(&self.b)[0] > 0.0
    }

    /// The dual bundle L⁻¹ (curvature −B).
    pub fn dual(&self) -> Self {
        BundleSpec {
            g: self.g.clone(),
            b: self.b.scale(-1.0),
        }
    }
}

/// F = B + ∂∂̄φ.
pub fn curvature(torus: &Torus, spec: &BundleSpec, phi: &RealField) -> HermitianField {
    let b = spec.b;
    torus.ddbar(phi).map(|h| *h + b)
}

/// Sorted eigenvalues of K = g⁻¹F at every point.
pub fn endo_eigenvalues(g: &KahlerData, f: &HermitianField) -> EigenField {
    let spectra: Vec<Spectrum> = f.matrices().par_iter().map(|m| g.pencil_eigenvalues(m)).collect();
    EigenField::from_spectra(*f.grid(), spectra).expect("same grid")
}

/// ζ = Π(1 + iλ_j) = det(I + iK).
#[inline]
pub fn zeta_pointwise(lambda: &[f64]) -> Complex64 {
    lambda
        .iter()
        .fold(Complex64::new(1.0, 0.0), |z, &l| z * Complex64::new(1.0, l))
}

/// θ = Σ arctan λ_j.
#[inline]
pub fn theta_pointwise(lambda: &[f64]) -> f64 {
    lambda.iter().map(|l| l.atan()).sum()
}

/// Evaluates θ(F) without an eigen-decomposition where possible.
///
/// On curves θ = arctan(F/g). On surfaces the two arctangents sum to a value
/// in (−π, π), so θ = atan2(tr K, 1 − det K) on the principal branch.
/// Threefolds fall back to the eigenvalues.
#[derive(Clone, Debug)]
pub struct ThetaEvaluator {
    g: KahlerData,
    g_inv: CMat,
    det_g: f64,
}

impl ThetaEvaluator {
    pub fn new(g: &KahlerData) -> Self {
        ThetaEvaluator {
            g: g.clone(),
            g_inv: *g.inverse(),
            det_g: g.matrix().det().re,
        }
    }

    #[inline]
    pub fn theta(&self, f: &CMat) -> f64 {
        match f.dim() {
            1 => (f[(0, 0)].re * self.g_inv[(0, 0)].re).atan(),
            2 => {
                let gi = &self.g_inv;
                let tr = (gi[(0, 0)] * f[(0, 0)] + gi[(0, 1)] * f[(1, 0)] + gi[(1, 0)] * f[(0, 1)] + gi[(1, 1)] * f[(1, 1)]).re;
                let det = (f[(0, 0)] * f[(1, 1)] - f[(0, 1)] * f[(1, 0)]).re / self.det_g;
                tr.atan2(1.0 - det)
            }
            _ => theta_pointwise(&self.g.pencil_eigenvalues(f)[..f.dim()]),
        }
    }
}

/// v = |ζ| = Π √(1 + λ_j²).
#[inline]
pub fn vmod_pointwise(lambda: &[f64]) -> f64 {
    lambda.iter().map(|l| (1.0 + l * l).sqrt()).product()
}

/// ζ by direct determinant: det(g + iF) / det(g).
pub fn zeta_direct(g: &KahlerData, f: &CMat) -> Complex64 {
    let m = *g.matrix() + f.scale_c(Complex64::i());
    m.det() / g.matrix().det()
}

pub fn zeta_field(lambda: &EigenField) -> ComplexField {
    lambda.map_scalar(zeta_pointwise)
}

pub fn theta_field(lambda: &EigenField) -> RealField {
    lambda.map_scalar(theta_pointwise)
}

pub fn vmod_field(lambda: &EigenField) -> RealField {
    lambda.map_scalar(vmod_pointwise)
}

/// η = g + F g⁻¹ F at one point.
#[inline]
pub fn eta_pointwise(g: &KahlerData, f: &CMat) -> CMat {
    (*g.matrix() + *f * *g.inverse() * *f).hermitian_part()
}

pub fn eta(g: &KahlerData, f: &HermitianField) -> HermitianField {
    f.map(|m| eta_pointwise(g, m))
}

/// Pointwise inverse of η, flagging numerically singular points.
pub fn eta_inverse(eta: &HermitianField) -> Result<HermitianField, GeometryError> {
    let inv: Vec<Result<CMat, GeometryError>> = eta
        .matrices()
        .par_iter()
        .enumerate()
        .map(|(p, m)| {
            let cond = m.condition();
            match m.inverse() {
                Some(i) if cond <= ETA_CONDITION_LIMIT => Ok(i.hermitian_part()),
                _ => Err(GeometryError::EtaIllConditioned { point: p, condition: cond }),
            }
        })
        .collect();
    let data = inv.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(HermitianField::from_matrices(*eta.grid(), data).expect("same grid"))
}

/// η⁻¹ = g^{-1/2}(I + K_h²)⁻¹g^{-1/2} through the Hermitian pencil; always
/// well conditioned relative to g.
#[inline]
pub fn eta_inverse_pointwise(g: &KahlerData, f: &CMat) -> CMat {
    let kh = g.pencil(f);
    let n = f.dim();
    let inner = (CMat::identity(n) + kh * kh)
        .inverse()
        .expect("I + K² is positive definite");
    (*g.inv_sqrt() * inner * *g.inv_sqrt()).hermitian_part()
}

/// κ = Re(e^{−iθ̂} ζ/|ζ|).
pub fn kappa(zeta: &ComplexField, theta_hat: f64) -> RealField {
    let rot = Complex64::from_polar(1.0, -theta_hat);
    zeta.map(|z| (rot * z / z.norm()).re)
}

/// Coefficient c of the stability form Ω = c·g + F: cot θ̂ for surfaces,
/// −tan(θ̂ − (n−1)π/2) in the supercritical higher-dimensional case.
pub fn stability_coefficient(theta_hat: f64, n: usize) -> Result<f64, GeometryError> {
    match n {
        1 => Ok(-(theta_hat).tan()),
        2 => {
            let s = theta_hat.sin();
            if s.abs() < 1e-12 {
                return Err(GeometryError::CotangentPole(theta_hat));
            }
            Ok(theta_hat.cos() / s)
        }
        _ => {
            let bound = (n as f64 - 2.0) * FRAC_PI_2;
            if theta_hat <= bound {
                return Err(GeometryError::NotSupercritical { theta_hat, bound });
            }
            Ok(-(theta_hat - (n as f64 - 1.0) * FRAC_PI_2).tan())
        }
    }
}

/// Ω = c·g + F with c from [`stability_coefficient`].
pub fn omega_stability_form(
    g: &KahlerData,
    f: &HermitianField,
    theta_hat: f64,
) -> Result<HermitianField, GeometryError> {
    let c = stability_coefficient(theta_hat, g.dim())?;
    let cg = g.matrix().scale(c);
    Ok(f.map(|m| cg + *m))
}

/// ‖(I+iK)⁻¹ − [(I+K²)⁻¹ − iK(I+K²)⁻¹]‖_F for Hermitian K.
pub fn oracle_ident(k: &CMat) -> f64 {
    let n = k.dim();
    let id = CMat::identity(n);
    let i = Complex64::i();
    let lhs = (id + k.scale_c(i)).inverse().expect("I + iK is invertible");
    let q = (id + *k * *k).inverse().expect("I + K² is invertible");
    let rhs = q - (*k * q).scale_c(i);
    (lhs - rhs).frobenius_norm()
}

/// ‖g⁻¹ − [η⁻¹ + η⁻¹ F g⁻¹ F g⁻¹]‖_F.
pub fn oracle_ginverse(g: &KahlerData, f: &CMat) -> f64 {
    let eta_inv = eta_pointwise(g, f).inverse().expect("η is positive definite");
    let gi = *g.inverse();
    let rhs = eta_inv + eta_inv * *f * gi * *f * gi;
    (gi - rhs).frobenius_norm()
}

/// |unwound arg det(I+iK) − Σ arctan λ_j| for Hermitian K.
///
/// The log-determinant side uses a direct complex determinant and
/// √det(I+K²); its principal value is lifted by the multiple of 2π nearest
/// the sum of the factor arguments arg(1 + iλ_j).
pub fn oracle_theta_log_vs_arctan(k: &CMat) -> f64 {
    let n = k.dim();
    let id = CMat::identity(n);
    let zeta = (id + k.scale_c(Complex64::i())).det();
    let v = (id + *k * *k).det().re.sqrt();
    let principal = (zeta / v).ln().im;
    let lambda = hermitian_eigenvalues(k);
    let factor_args: f64 = lambda[..n].iter().map(|&l| l.atan2(1.0)).sum();
    let lift = ((factor_args - principal) / (2.0 * PI)).round();
    let unwound = principal + 2.0 * PI * lift;
    (unwound - theta_pointwise(&lambda[..n])).abs()
}

/// Central-difference check of δθ = Tr((I+K²)⁻¹δK).
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaThetaReport {
    /// Analytic directional derivative.
    pub analytic: f64,
    /// (ε, |central difference − analytic|) for each ε in the schedule.
    pub errors: Vec<(f64, f64)>,
    /// Order from the first pair of step sizes; NaN when both errors vanish.
    pub observed_order: f64,
}

impl DeltaThetaReport {
    /// Error at the schedule entry closest to `eps`.
    pub fn error_at(&self, eps: f64) -> f64 {
        self.errors
            .iter()
            .min_by(|a, b| (a.0.ln() - eps.ln()).abs().total_cmp(&(b.0.ln() - eps.ln()).abs()))
            .map(|e| e.1)
            .unwrap_or(f64::NAN)
    }
}

fn theta_of_matrix(k: &CMat) -> f64 {
    let l = hermitian_eigenvalues(k);
    theta_pointwise(&l[..k.dim()])
}

pub fn oracle_delta_theta(k: &CMat, dk: &CMat, schedule: &[f64]) -> DeltaThetaReport {
    let n = k.dim();
    let q = (CMat::identity(n) + *k * *k).inverse().expect("I + K² is invertible");
    let analytic = (q * *dk).trace().re;
    let errors: Vec<(f64, f64)> = schedule
        .iter()
        .map(|&e| {
            let plus = theta_of_matrix(&(*k + dk.scale(e)));
            let minus = theta_of_matrix(&(*k - dk.scale(e)));
            (e, ((plus - minus) / (2.0 * e) - analytic).abs())
        })
        .collect();
    let observed_order = if errors.len() >= 2 {
        let (e0, r0) = errors[0];
        let (e1, r1) = errors[1];
        if r0 == 0.0 && r1 == 0.0 {
            f64::NAN
        } else {
            (r0 / r1).ln() / (e0 / e1).ln()
        }
    } else {
        f64::NAN
    };
    DeltaThetaReport {
        analytic,
        errors,
        observed_order,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{integrate, GridSpec};
    use crate::linalg::jacobi_eigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> CMat {
        let mut m = CMat::zeros(n);
        for i in 0..n {
            m[(i, i)] = c(rng.gen_range(-scale..scale), 0.0);
            for j in (i + 1)..n {
                let z = c(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale));
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
            }
        }
        m
    }

    fn random_metric(rng: &mut ChaCha8Rng, n: usize) -> KahlerData {
        let a = random_hermitian(rng, n, 1.0);
        KahlerData::new(a * a + CMat::identity(n).scale(0.5)).unwrap()
    }

    #[test]
    fn fast_theta_matches_eigenvalue_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=3 {
            for trial in 0..400 {
                let g = random_metric(&mut rng, n);
                let scale = if trial % 2 == 0 { 1.0 } else { 30.0 };
                let f = random_hermitian(&mut rng, n, scale);
                let expect = theta_pointwise(&g.pencil_eigenvalues(&f)[..n]);
                let got = ThetaEvaluator::new(&g).theta(&f);
                assert!((got - expect).abs() < 1e-12, "n={n}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn metric_validation() {
        let bad = CMat::from_real_rows(2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(KahlerData::new(bad), Err(GeometryError::MetricNotPositive(_))));
        let skew = CMat::from_rows(2, &[c(1.0, 0.0), c(0.1, 0.0), c(0.3, 0.0), c(1.0, 0.0)]);
        assert!(matches!(KahlerData::new(skew), Err(GeometryError::MetricNotHermitian(_))));
        let b = CMat::from_rows(2, &[c(1.0, 0.0), c(0.0, 1.0), c(0.0, 1.0), c(1.0, 0.0)]);
        assert_eq!(
            BundleSpec::new(KahlerData::flat(2), b),
            Err(GeometryError::CurvatureNotHermitian(0, 1))
        );
    }

    #[test]
    fn ampleness() {
        assert!(BundleSpec::flat_diagonal(&[3.0, 3.0]).is_ample());
        assert!(!BundleSpec::flat_diagonal(&[1.0, -1.0]).is_ample());
        assert!(!BundleSpec::flat_diagonal(&[0.0, 2.0]).is_ample());
    }

    #[test]
    fn curvature_examples() {
        let t = Torus::new(GridSpec::new(1, 16).unwrap());
        let zero = RealField::zeros(*t.grid());
        let spec = BundleSpec::flat_diagonal(&[2.0]);
        let f = curvature(&t, &spec, &zero);
        assert!(f.matrices().iter().all(|m| *m == CMat::from_real_diag(&[2.0])));

        let flat = BundleSpec::flat_diagonal(&[0.0]);
        let phi = RealField::from_fn(*t.grid(), |x| (2.0 * PI * x[0]).cos());
        let f = curvature(&t, &flat, &phi);
        for p in 0..t.grid().points() {
            let want = -PI * PI * (2.0 * PI * t.grid().coords(p)[0]).cos();
            assert!((f.at(p)[(0, 0)].re - want).abs() < 1e-12);
        }
    }

    #[test]
    fn curvature_mean_is_class() {
        let t = Torus::new(GridSpec::new(2, 16).unwrap());
        let b = CMat::from_rows(2, &[c(2.0, 0.0), c(0.5, -0.25), c(0.5, 0.25), c(1.0, 0.0)]);
        let spec = BundleSpec::new(KahlerData::flat(2), b).unwrap();
        let phi = t.random_band_limited(9, 4, 0.1).unwrap();
        let f = curvature(&t, &spec, &phi);
        for j in 0..2 {
            for k in 0..2 {
                assert!((f.entry_mean(j, k) - b[(j, k)]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn eigenvalue_examples() {
        let g = GridSpec::new(2, 8).unwrap();
        let kd = KahlerData::flat(2);
        let zero = HermitianField::constant(g, CMat::zeros(2));
        let ev = endo_eigenvalues(&kd, &zero);
        assert!(ev.min() == 0.0 && ev.max() == 0.0);
        let f = HermitianField::constant(g, CMat::from_real_diag(&[3.0, 3.0]));
        let ev = endo_eigenvalues(&kd, &f);
        assert_eq!(ev.at(0), &[3.0, 3.0]);
    }

    #[test]
    fn pencil_eigenvalues_match_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=3 {
            for _ in 0..300 {
                let g = random_metric(&mut rng, n);
                let f = random_hermitian(&mut rng, n, 5.0);
                let fast = g.pencil_eigenvalues(&f);
                // Oracle: Jacobi on the Cholesky-free similarity
                // g^{-1/2}Fg^{-1/2} built from an independent Jacobi root.
                let (gv, gvec) = jacobi_eigen(g.matrix());
                let mut d = CMat::zeros(n);
                for i in 0..n {
                    d[(i, i)] = c(1.0 / gv[i].sqrt(), 0.0);
                }
                let s = gvec * d * gvec.adjoint();
                let (slow, _) = jacobi_eigen(&(s * f * s));
                for k in 0..n {
                    assert!((fast[k] - slow[k]).abs() < 1e-11 * (1.0 + slow[k].abs()));
                }
            }
        }
    }

    #[test]
    fn zeta_theta_v_examples() {
        assert_eq!(zeta_pointwise(&[0.0, 0.0]), c(1.0, 0.0));
        assert_eq!(theta_pointwise(&[0.0, 0.0]), 0.0);
        assert_eq!(vmod_pointwise(&[0.0, 0.0]), 1.0);

        let z = zeta_pointwise(&[3.0, 3.0]);
        assert!((z - c(-8.0, 6.0)).norm() < 1e-14);
        assert!((vmod_pointwise(&[3.0, 3.0]) - 10.0).abs() < 1e-14);
        let th = theta_pointwise(&[3.0, 3.0]);
        assert!((th - 2.498_091_544_796_509).abs() < 1e-13);
        // Principal arg of −8+6i lifted into (π/2, π).
        assert!((th - (6.0f64).atan2(-8.0)).abs() < 1e-13);

        let z = zeta_pointwise(&[1.0, 1.0]);
        assert!((z - c(0.0, 2.0)).norm() < 1e-15);
        assert!((theta_pointwise(&[1.0, 1.0]) - FRAC_PI_2).abs() < 1e-15);
        assert!((vmod_pointwise(&[1.0, 1.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zeta_two_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for n in 1..=3 {
            for _ in 0..200 {
                let g = random_metric(&mut rng, n);
                let f = random_hermitian(&mut rng, n, 3.0);
                let l = g.pencil_eigenvalues(&f);
                let a = zeta_pointwise(&l[..n]);
                let b = zeta_direct(&g, &f);
                assert!((a - b).norm() < 1e-12 * a.norm().max(1.0), "{a} {b}");
                assert!((a.norm() - vmod_pointwise(&l[..n])).abs() < 1e-12 * a.norm());
                let th = theta_pointwise(&l[..n]);
                assert!((Complex64::from_polar(1.0, th) - a / a.norm()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn eta_examples() {
        let g = GridSpec::new(1, 8).unwrap();
        let kd = KahlerData::flat(1);
        let zero = HermitianField::constant(g, CMat::zeros(1));
        assert_eq!(eta(&kd, &zero).at(0), kd.matrix());
        let f = HermitianField::constant(g, CMat::from_real_diag(&[2.0]));
        let e = eta(&kd, &f);
        assert_eq!(e.at(0)[(0, 0)].re, 5.0);
        let ei = eta_inverse(&e).unwrap();
        assert!((ei.at(0)[(0, 0)].re - 0.2).abs() < 1e-16);
    }

    #[test]
    fn eta_relative_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for n in 1..=3 {
            for _ in 0..100 {
                let g = random_metric(&mut rng, n);
                let f = random_hermitian(&mut rng, n, 3.0);
                let l = g.pencil_eigenvalues(&f);
                let e = g.pencil_eigenvalues(&eta_pointwise(&g, &f));
                let mut want: Vec<f64> = l[..n].iter().map(|x| 1.0 + x * x).collect();
                want.sort_by(|a, b| a.total_cmp(b));
                for k in 0..n {
                    assert!((e[k] - want[k]).abs() < 1e-11 * want[k]);
                }
                let direct = eta_pointwise(&g, &f).inverse().unwrap();
                let via_pencil = eta_inverse_pointwise(&g, &f);
                assert!((direct - via_pencil).frobenius_norm() < 1e-12);
            }
        }
    }

    #[test]
    fn eta_inverse_flags_singular_points() {
        let g = GridSpec::new(2, 8).unwrap();
        let m = HermitianField::constant(g, CMat::from_real_diag(&[1.0, 1e-14]));
        assert!(matches!(eta_inverse(&m), Err(GeometryError::EtaIllConditioned { .. })));
    }

    #[test]
    fn kappa_examples() {
        let g = GridSpec::new(1, 8).unwrap();
        let th = 2.0 * 3.0f64.atan();
        let z = ComplexField::filled(g, c(-8.0, 6.0));
        assert!(kappa(&z, th).values().iter().all(|&k| (k - 1.0).abs() < 1e-15));
        let z = ComplexField::filled(g, Complex64::from_polar(2.0, 0.4 + FRAC_PI_2));
        assert!(kappa(&z, 0.4).sup_norm() < 1e-15);
    }

    #[test]
    fn kappa_bounded_on_random_metric() {
        let t = Torus::new(GridSpec::new(2, 16).unwrap());
        let spec = BundleSpec::flat_diagonal(&[3.0, 3.0]);
        let phi = t.random_band_limited(2, 4, 0.1).unwrap();
        let l = endo_eigenvalues(&spec.g, &curvature(&t, &spec, &phi));
        let z = zeta_field(&l);
        let k = kappa(&z, integrate(&z).arg());
        assert!(k.max() <= 1.0 + 1e-13);
        let th = theta_field(&l);
        let th_hat = integrate(&z).arg();
        for p in 0..t.grid().points() {
            assert!((k.values()[p] - (th_hat - th.values()[p]).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn omega_examples() {
        let g = GridSpec::new(2, 8).unwrap();
        let kd = KahlerData::flat(2);
        let b = CMat::from_real_diag(&[1.0, 1.0]);
        let f = HermitianField::constant(g, b);
        let o = omega_stability_form(&kd, &f, FRAC_PI_2).unwrap();
        assert!((*o.at(0) - b).frobenius_norm() < 1e-15);

        let b = CMat::from_real_diag(&[2.0, 1.0]);
        let z = zeta_pointwise(&[2.0, 1.0]);
        assert!((z - c(-1.0, 3.0)).norm() < 1e-15);
        let th = z.arg();
        assert!((th - 1.892_546_881_191_538_9).abs() < 1e-12);
        let o = omega_stability_form(&kd, &HermitianField::constant(g, b), th).unwrap();
        let want = CMat::from_real_diag(&[2.0 - 1.0 / 3.0, 1.0 - 1.0 / 3.0]);
        assert!((*o.at(0) - want).frobenius_norm() < 1e-14);

        let g3 = GridSpec::new(3, 8).unwrap();
        let f3 = HermitianField::constant(g3, CMat::identity(3));
        assert!(matches!(
            omega_stability_form(&KahlerData::flat(3), &f3, 1.0),
            Err(GeometryError::NotSupercritical { .. })
        ));
        assert!(matches!(
            omega_stability_form(&kd, &HermitianField::constant(g, b), 0.0),
            Err(GeometryError::CotangentPole(_))
        ));
    }

    #[test]
    fn ident_oracle() {
        assert_eq!(oracle_ident(&CMat::zeros(2)), 0.0);
        let k = CMat::from_real_diag(&[2.0]);
        assert!(oracle_ident(&k) < 1e-15);
        let i = CMat::identity(1).scale_c(c(1.0, 2.0)).inverse().unwrap();
        assert!((i[(0, 0)] - c(0.2, -0.4)).norm() < 1e-15);
    }

    #[test]
    fn ginverse_oracle() {
        let kd = KahlerData::flat(1);
        assert_eq!(oracle_ginverse(&kd, &CMat::zeros(1)), 0.0);
        assert!(oracle_ginverse(&kd, &CMat::from_real_diag(&[2.0])) < 1e-15);
    }

    #[test]
    fn log_vs_arctan_oracle() {
        assert_eq!(oracle_theta_log_vs_arctan(&CMat::zeros(2)), 0.0);
        assert!(oracle_theta_log_vs_arctan(&CMat::from_real_diag(&[3.0, 3.0])) < 1e-13);
        assert!(oracle_theta_log_vs_arctan(&CMat::from_real_diag(&[40.0, 45.0, -2.0])) < 1e-13);
    }

    #[test]
    fn delta_theta_oracle() {
        let sched = [1e-3, 1e-4, 1e-5, 1e-6];
        let r = oracle_delta_theta(&CMat::zeros(2), &CMat::zeros(2), &sched);
        assert_eq!(r.analytic, 0.0);
        assert!(r.errors.iter().all(|e| e.1 == 0.0));

        let r = oracle_delta_theta(&CMat::zeros(1), &CMat::identity(1), &sched);
        assert_eq!(r.analytic, 1.0);
        assert!(r.observed_order > 1.9);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = random_hermitian(&mut rng, 3, 2.0);
        let dk = random_hermitian(&mut rng, 3, 1.0);
        let r = oracle_delta_theta(&k, &dk, &sched);
        assert!(r.error_at(1e-4) < 1e-6);
        assert!(r.observed_order > 1.9, "{r:?}");
    }
}
