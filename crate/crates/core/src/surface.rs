//! The complex-surface route: on n = 2 the equation is equivalent to the
//! Monge-Ampère problem
//!
//! ```text
//! det(M₀ + ∂∂̄φ) = (1 + cot²θ̂) det g,   M₀ = cot θ̂ · g + B + ∂∂̄ψ₀,
//! ```
//!
//! which is solvable exactly when the constant form cot θ̂ · g + B is
//! positive. Negative phases are handled on the dual bundle.
//!
//! The solver integrates the parabolic flow
//! `φ̇ = log det(M₀ + ∂∂̄φ) − log((1 + cot²θ̂) det g)` with the same exponential
//! integrator as the mean curvature flow.

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{fnv1a, Checkpoint, CheckpointError, Route};
use crate::flow::{etdrk4_step, run_flow, FlowConfig, FlowError, FlowOutcome, FlowStatus};
use crate::geometry::{zeta_pointwise, BundleSpec, KahlerData, ThetaEvaluator};
use crate::grid::{integrate, GridError, RealField};
use crate::invariants::{constant_theta_hat, stability_check, InvariantError, Stability, DEGREE_ZERO_TOL};
use crate::linalg::CMat;
use crate::spectral::{Spectrum, Torus};

#[derive(Debug, Error, PartialEq)]
pub enum SurfaceError {
    #[error("the surface route requires n=2, got n={0}")]
    NotSurface(usize),
    #[error("degree zero: a1 = {a1:e} vanishes, use the Poisson route")]
    DegreeZero { a1: f64 },
    #[error("degree-zero route requires a1 = 0, got a1 = {a1:e}")]
    NotDegreeZero { a1: f64 },
    #[error("bundle is not stable: cot(θ̂) g + B has minimum eigenvalue {margin:e}")]
    Unstable { margin: f64 },
    #[error("background potential lives on a different grid")]
    GridMismatch,
    #[error("invalid MA configuration: {0}")]
    Config(String),
    #[error("{route} route did not converge: {status}")]
    NotConverged { route: &'static str, status: String },
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// cot θ̂ = (1 − a₂)/a₁.
pub fn cot_hat(a1: f64, a2: f64) -> Result<f64, SurfaceError> {
    if a1.abs() < DEGREE_ZERO_TOL {
        return Err(SurfaceError::DegreeZero { a1 });
    }
    Ok((1.0 - a2) / a1)
}

/// Problem data of the MA route, expressed on L or on L⁻¹ so that θ̂ > 0.
#[derive(Clone, Debug)]
pub struct MaSetup {
    pub g: KahlerData,
    pub b: CMat,
    pub psi0: RealField,
    pub theta_hat: f64,
    pub cot_hat: f64,
    /// (1 + cot²θ̂) det g.
    pub target: f64,
    pub eps_pos: f64,
    /// min eigenvalue of cot θ̂ · g + B relative to g.
    pub margin: f64,
    /// Whether the data were replaced by the dual bundle.
    pub reflected: bool,
}

impl MaSetup {
    /// Converts a potential between the caller's frame and the setup frame.
    /// Dualizing negates curvature and potentials alike.
    pub fn frame(&self, phi: &RealField) -> RealField {
        if self.reflected {
            phi.map(|x| -x)
        } else {
            phi.clone()
        }
    }

    /// Constant part cot θ̂ · g + B of M₀.
    pub fn omega0(&self) -> CMat {
        self.g.matrix().scale(self.cot_hat) + self.b
    }
}

pub fn ma_setup(spec: &BundleSpec, psi0: RealField, eps_pos: f64) -> Result<MaSetup, SurfaceError> {
    let n = spec.dim();
    if n != 2 {
        return Err(SurfaceError::NotSurface(n));
    }
    if psi0.grid().dim() != n {
        return Err(SurfaceError::GridMismatch);
    }
    if !(eps_pos > 0.0) {
        return Err(SurfaceError::Config(format!("eps_pos must be positive, got {eps_pos}")));
    }
    let theta_hat = constant_theta_hat(&spec.g, &spec.b)?;
    let (b, psi0, theta_hat, reflected) = if theta_hat < 0.0 {
        (spec.b.scale(-1.0), psi0.map(|x| -x), -theta_hat, true)
    } else {
        (spec.b, psi0, theta_hat, false)
    };
    let margin = match stability_check(&spec.g, &b, theta_hat) {
        Stability::DegreeZero => {
            return Err(SurfaceError::DegreeZero {
                a1: (*spec.g.inverse() * b).trace().re,
            })
        }
        Stability::Checked { margin, .. } => margin,
        Stability::NotApplicable(_) => return Err(SurfaceError::NotSurface(n)),
    };
    if margin <= 0.0 {
        return Err(SurfaceError::Unstable { margin });
    }
    let cot = theta_hat.cos() / theta_hat.sin();
    let target = (1.0 + cot * cot) * spec.g.matrix().det().re;
    Ok(MaSetup {
        g: spec.g.clone(),
        b,
        psi0,
        theta_hat,
        cot_hat: cot,
        target,
        eps_pos,
        margin,
        reflected,
    })
}

/// det(M₀ + ∂∂̄φ) − (1 + cot²θ̂) det g, with φ in the setup frame.
pub fn ma_residual(torus: &Torus, setup: &MaSetup, phi: &RealField) -> RealField {
    let hess = torus.hessian(&total_spectrum(torus, setup, phi));
    let w = setup.omega0();
    let target = setup.target;
    RealField::from_index_fn(*torus.grid(), |p| (w + hess.at(p)).det().re - target)
}

fn total_spectrum(torus: &Torus, setup: &MaSetup, phi: &RealField) -> Spectrum {
    torus.forward(&phi.zip_map(&setup.psi0, |a, b| a + b))
}

/// Pointwise DHYM residual of F = B + ∂∂̄(ψ₀ + φ) in the setup frame:
/// sup |Im ζ − tan θ̂ Re ζ| / |ζ|, or the cotangent form when |sin θ̂| > |cos θ̂|.
pub fn verify_dhym_equivalence(torus: &Torus, setup: &MaSetup, phi: &RealField) -> f64 {
    let hess = torus.hessian(&total_spectrum(torus, setup, phi));
    let (s, c) = setup.theta_hat.sin_cos();
    let use_tan = c.abs() >= s.abs();
    let (t, ct) = (s / c, c / s);
    let g = &setup.g;
    let b = setup.b;
    (0..torus.grid().points())
        .into_par_iter()
        .map(|p| {
            let ev = g.pencil_eigenvalues(&(b + hess.at(p)));
            let z = zeta_pointwise(&ev[..2]);
            let r = if use_tan { z.im - t * z.re } else { z.re - ct * z.im };
            r.abs() / z.norm()
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaConfig {
    pub eps_pos: f64,
    /// Convergence threshold on sup|ma_residual|.
    pub tol_residual: f64,
    pub max_steps: usize,
    pub dt_safety: f64,
    pub dt_growth: f64,
    pub dt_max: f64,
    /// Positivity retries per step, each halving dt.
    pub max_halvings: usize,
    pub monitor_cadence: usize,
}

impl Default for MaConfig {
    fn default() -> Self {
        MaConfig {
            eps_pos: 1e-6,
            tol_residual: 1e-8,
            max_steps: 20_000,
            dt_safety: 0.8,
            dt_growth: 1.5,
            dt_max: 2.0,
            max_halvings: 8,
            monitor_cadence: 10,
        }
    }
}

impl MaConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.eps_pos > 0.0) {
            v.push(format!("eps_pos must be > 0, got {}", self.eps_pos));
        }
        if !(self.tol_residual > 0.0) {
            v.push(format!("tol_residual must be > 0, got {}", self.tol_residual));
        }
        if !(self.dt_safety > 0.0 && self.dt_safety <= 1.0) {
            v.push(format!("dt_safety must lie in (0, 1], got {}", self.dt_safety));
        }
        if !(self.dt_growth >= 1.0) {
            v.push(format!("dt_growth must be >= 1, got {}", self.dt_growth));
        }
        if !(self.dt_max > 0.0) {
            v.push(format!("dt_max must be > 0, got {}", self.dt_max));
        }
        if self.monitor_cadence == 0 {
            v.push("monitor_cadence must be >= 1".into());
        }
        v
    }

    pub fn canonical(&self) -> String {
        format!(
            "eps_pos={:?};tol_residual={:?};dt_safety={:?};dt_growth={:?};dt_max={:?};max_halvings={};monitor_cadence={}",
            self.eps_pos,
            self.tol_residual,
            self.dt_safety,
            self.dt_growth,
            self.dt_max,
            self.max_halvings,
            self.monitor_cadence
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaFailure {
    PositivityLoss,
    MaxSteps,
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaStatus {
    Converged,
    Failed(MaFailure),
}

impl std::fmt::Display for MaStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaStatus::Converged => f.write_str("Converged"),
            MaStatus::Failed(x) => write!(f, "Failed({x:?})"),
        }
    }
}

/// One accepted iterate, potential in the setup frame.
#[derive(Clone, Debug)]
pub struct MaState {
    pub phi: RealField,
    pub t: f64,
    pub step: usize,
    pub dt: f64,
    pub sup_residual: f64,
    /// min over the grid of the smallest eigenvalue of M relative to g.
    pub min_eig: f64,
    /// ∫ det M / det g.
    pub volume_ratio: f64,
}

pub const MA_CSV_COLUMNS: [&str; 7] = ["route", "step", "t", "dt", "sup_residual", "min_eig_m", "volume_ratio"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaRecord {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub sup_residual: f64,
    pub min_eig: f64,
    pub volume_ratio: f64,
}

impl MaRecord {
    fn of(s: &MaState) -> Self {
        MaRecord {
            step: s.step,
            t: s.t,
            dt: s.dt,
            sup_residual: s.sup_residual,
            min_eig: s.min_eig,
            volume_ratio: s.volume_ratio,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "ma,{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.t, self.dt, self.sup_residual, self.min_eig, self.volume_ratio
        )
    }
}

pub fn ma_csv(records: &[MaRecord]) -> String {
    let mut s = MA_CSV_COLUMNS.join(",");
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct MaOutcome {
    pub status: MaStatus,
    /// Final potential in the caller's frame, normalized to sup φ = 0.
    pub phi: RealField,
    pub state: MaState,
    pub records: Vec<MaRecord>,
    pub message: Option<String>,
}

pub struct MaSolver<'a> {
    torus: &'a Torus,
    setup: MaSetup,
    cfg: MaConfig,
    lap: Vec<f64>,
    nyquist: Vec<bool>,
    psi_hat: Spectrum,
}

impl<'a> MaSolver<'a> {
    pub fn new(torus: &'a Torus, setup: MaSetup, cfg: MaConfig) -> Result<Self, SurfaceError> {
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(SurfaceError::Config(v.join("; ")));
        }
        if *setup.psi0.grid() != *torus.grid() {
            return Err(SurfaceError::GridMismatch);
        }
        let lap = torus.laplacian_symbols(setup.g.inverse());
        let psi_hat = torus.forward(&setup.psi0);
        Ok(MaSolver {
            torus,
            nyquist: torus.nyquist_mask(),
            setup,
            cfg,
            lap,
            psi_hat,
        })
    }

    pub fn setup(&self) -> &MaSetup {
        &self.setup
    }

    pub fn config(&self) -> &MaConfig {
        &self.cfg
    }

    /// Per point (min pencil eigenvalue, det M) of M₀ + ∂∂̄u.
    fn pointwise(&self, u: &Spectrum) -> Vec<(f64, f64)> {
        let total: Spectrum = u.par_iter().zip(self.psi_hat.par_iter()).map(|(a, b)| a + b).collect();
        let hess = self.torus.hessian(&total);
        let w = self.setup.omega0();
        let g = &self.setup.g;
        (0..self.torus.grid().points())
            .into_par_iter()
            .map(|p| {
                let m = w + hess.at(p);
                (g.pencil_eigenvalues(&m)[0], m.det().re)
            })
            .collect()
    }

    pub fn evaluate(&self, phi: RealField, t: f64, step: usize, dt: f64) -> MaState {
        let pts = self.pointwise(&self.torus.forward(&phi));
        let target = self.setup.target;
        let dg = self.setup.g.matrix().det().re;
        let sup_residual = pts.iter().fold(0.0f64, |m, x| m.max((x.1 - target).abs()));
        let min_eig = pts.iter().fold(f64::INFINITY, |m, x| m.min(x.0));
        let ratio = RealField::from_index_fn(*self.torus.grid(), |p| pts[p].1 / dg);
        MaState {
            phi,
            t,
            step,
            dt,
            sup_residual,
            min_eig,
            volume_ratio: integrate(&ratio),
        }
    }

    pub fn initial_state(&self, phi0: RealField) -> Result<MaState, SurfaceError> {
        if *phi0.grid() != *self.torus.grid() {
            return Err(SurfaceError::GridMismatch);
        }
        Ok(self.evaluate(phi0, 0.0, 0, 0.0))
    }

    /// σ dx² / (π² n Λ) with Λ = 1 / min eig M.
    pub fn cfl_dt(&self, state: &MaState) -> f64 {
        let dx = self.torus.grid().dx();
        self.cfg.dt_safety * dx * dx * state.min_eig.max(0.0) / (std::f64::consts::PI.powi(2) * 2.0)
    }

    fn next_dt(&self, state: &MaState) -> f64 {
        let cfl = self.cfl_dt(state);
        if state.dt > 0.0 {
            (state.dt * self.cfg.dt_growth).min(self.cfg.dt_max).max(cfl)
        } else {
            cfl
        }
    }

    /// One exponential-integrator step; `None` when a stage leaves the
    /// positive cone or produces non-finite values.
    pub fn step(&self, state: &MaState, h: f64) -> Option<MaState> {
        let big_lambda = 1.0 / state.min_eig;
        let lap = &self.lap;
        let log_target = self.setup.target.ln();
        let nonlinear = |u: &Spectrum| -> Result<Spectrum, ()> {
            let vals = self.pointwise(u);
            if vals.iter().any(|(e, d)| !(*e > 0.0 && d.is_finite())) {
                return Err(());
            }
            let rhs = RealField::from_index_fn(*self.torus.grid(), |p| vals[p].1.ln() - log_target);
            let mut out = self.torus.forward(&rhs);
            out.par_iter_mut()
                .zip(u.par_iter())
                .zip(self.nyquist.par_iter())
                .enumerate()
                .for_each(|(k, ((o, x), &nyq))| {
                    if nyq {
                        *o = Complex64::new(0.0, 0.0);
                    }
                    *o -= big_lambda * lap[k] * *x;
                });
            Ok(out)
        };
        let next = etdrk4_step(&self.torus.forward(&state.phi), |k| big_lambda * lap[k], h, nonlinear).ok()?;
        let phi = self.torus.inverse_real(next);
        if !phi.is_finite() {
            return None;
        }
        let s = self.evaluate(phi, state.t + h, state.step + 1, h);
        s.sup_residual.is_finite().then_some(s)
    }

    pub fn run(&self, start: MaState, observer: &mut dyn FnMut(&MaState, &MaRecord)) -> MaOutcome {
        let mut records = Vec::new();
        let mut state = start;
        let mut emit = |s: &MaState, records: &mut Vec<MaRecord>| {
            if records.last().map(|r: &MaRecord| r.step) != Some(s.step) {
                let r = MaRecord::of(s);
                observer(s, &r);
                records.push(r);
            }
        };
        let finish = |status, state: MaState, records, message| MaOutcome {
            status,
            phi: sup_normalized(&self.setup.frame(&state.phi)),
            state,
            records,
            message,
        };
        emit(&state, &mut records);
        if !(state.min_eig > self.cfg.eps_pos) {
            let m = format!(
                "min eigenvalue of M is {:e}, not above the floor {:e}",
                state.min_eig, self.cfg.eps_pos
            );
            return finish(MaStatus::Failed(MaFailure::PositivityLoss), state, records, Some(m));
        }
        loop {
            if state.sup_residual < self.cfg.tol_residual {
                emit(&state, &mut records);
                return finish(MaStatus::Converged, state, records, None);
            }
            if state.step >= self.cfg.max_steps {
                emit(&state, &mut records);
                return finish(MaStatus::Failed(MaFailure::MaxSteps), state, records, None);
            }
            let mut dt = self.next_dt(&state);
            let mut accepted = None;
            let mut any_finite = false;
            for _ in 0..=self.cfg.max_halvings {
                if let Some(next) = self.step(&state, dt) {
                    any_finite = true;
                    if next.min_eig > self.cfg.eps_pos {
                        accepted = Some(next);
                        break;
                    }
                }
                dt *= 0.5;
            }
            match accepted {
                Some(next) => {
                    state = next;
                    if state.step % self.cfg.monitor_cadence == 0 {
                        emit(&state, &mut records);
                    }
                }
                None => {
                    emit(&state, &mut records);
                    let failure = if any_finite {
                        MaFailure::PositivityLoss
                    } else {
                        MaFailure::NonFinite
                    };
                    let m = format!(
                        "step {} rejected after {} halvings",
                        state.step + 1,
                        self.cfg.max_halvings
                    );
                    return finish(MaStatus::Failed(failure), state, records, Some(m));
                }
            }
        }
    }

    pub fn checkpoint(&self, state: &MaState) -> Checkpoint {
        let grid = self.torus.grid();
        Checkpoint {
            route: Route::Ma,
            n: grid.dim(),
            size: grid.size(),
            t: state.t,
            step: state.step,
            dt: state.dt,
            config_hash: self.cfg.hash(),
            gradf_ref: 0.0,
            hypercritical: false,
            fields: vec![("phi".into(), state.phi.values().to_vec())],
        }
    }

    pub fn restore(&self, ckpt: &Checkpoint) -> Result<MaState, CheckpointError> {
        if ckpt.route != Route::Ma {
            return Err(CheckpointError::RouteMismatch {
                expected: Route::Ma,
                found: ckpt.route,
            });
        }
        if ckpt.config_hash != self.cfg.hash() {
            return Err(CheckpointError::ConfigMismatch {
                expected: self.cfg.hash(),
                found: ckpt.config_hash,
            });
        }
        let phi = ckpt.real_field("phi", self.torus.grid())?;
        Ok(self.evaluate(phi, ckpt.t, ckpt.step, ckpt.dt))
    }
}

fn sup_normalized(phi: &RealField) -> RealField {
    let m = phi.max();
    phi.map(|x| x - m)
}

/// Solves the MA problem from φ₀ (caller's frame).
pub fn ma_solve(torus: &Torus, setup: &MaSetup, phi0: &RealField, cfg: &MaConfig) -> Result<MaOutcome, SurfaceError> {
    let cfg = MaConfig {
        eps_pos: setup.eps_pos,
        ..cfg.clone()
    };
    let solver = MaSolver::new(torus, setup.clone(), cfg)?;
    let start = solver.initial_state(setup.frame(phi0))?;
    Ok(solver.run(start, &mut |_, _| {}))
}

#[derive(Clone, Debug)]
pub struct DegreeZeroSolution {
    pub phi: RealField,
    /// sup |tr_g(B + ∂∂̄(ψ₀ + φ))|.
    pub residual: f64,
}

/// Finds φ with tr_g(B + ∂∂̄(ψ₀ + φ)) = 0 by one Poisson solve.
pub fn degree_zero_solve(torus: &Torus, spec: &BundleSpec, psi0: &RealField) -> Result<DegreeZeroSolution, SurfaceError> {
    let gi = *spec.g.inverse();
    let a1 = (gi * spec.b).trace().re;
    if a1.abs() >= DEGREE_ZERO_TOL {
        return Err(SurfaceError::NotDegreeZero { a1 });
    }
    let lap_psi = torus.laplacian(psi0, &gi);
    let rho = lap_psi.map(|x| -(a1 + x));
    let phi = torus.poisson_solve(&rho, &gi)?;
    let total = phi.zip_map(psi0, |a, b| a + b);
    let residual = torus.laplacian(&total, &gi).map(|x| x + a1).sup_norm();
    Ok(DegreeZeroSolution { phi, residual })
}

/// Both solution routes on the same data and their agreement.
pub struct RouteReport {
    /// sup of the mean-removed difference of the two potentials.
    pub deviation: f64,
    pub ma_theta_deviation: f64,
    pub flow_theta_deviation: f64,
    pub ma: MaOutcome,
    pub flow: FlowOutcome,
}

/// sup|θ − θ̂| for F = B + ∂∂̄(ψ₀ + φ), φ in the caller's frame.
pub fn theta_deviation(torus: &Torus, spec: &BundleSpec, psi0: &RealField, phi: &RealField, theta_hat: f64) -> f64 {
    let total = torus.forward(&phi.zip_map(psi0, |a, b| a + b));
    let hess = torus.hessian(&total);
    let ev = ThetaEvaluator::new(&spec.g);
    let b = spec.b;
    (0..torus.grid().points())
        .into_par_iter()
        .map(|p| (ev.theta(&(b + hess.at(p))) - theta_hat).abs())
        .reduce(|| 0.0, f64::max)
}

pub fn cross_validate_routes(
    torus: &Torus,
    spec: &BundleSpec,
    psi0: &RealField,
    flow_cfg: &FlowConfig,
    ma_cfg: &MaConfig,
) -> Result<RouteReport, SurfaceError> {
    let setup = ma_setup(spec, psi0.clone(), ma_cfg.eps_pos)?;
    let ma = ma_solve(torus, &setup, &RealField::zeros(*torus.grid()), ma_cfg)?;
    if ma.status != MaStatus::Converged {
        return Err(SurfaceError::NotConverged {
            route: "MA",
            status: ma.status.to_string(),
        });
    }
    // The flow evolves the total potential ψ₀ + φ.
    let flow = run_flow(torus, spec, psi0.clone(), flow_cfg)?;
    if flow.status != FlowStatus::Converged {
        return Err(SurfaceError::NotConverged {
            route: "flow",
            status: format!("{:?}", flow.status),
        });
    }
    let theta_hat = flow.state.theta_hat;
    let flow_rel = flow.state.phi.zip_map(psi0, |a, b| a - b);
    let diff = ma.phi.zip_map(&flow_rel, |a, b| a - b).mean_removed();
    let ma_theta_deviation = theta_deviation(torus, spec, psi0, &ma.phi, theta_hat);
    Ok(RouteReport {
        deviation: diff.sup_norm(),
        ma_theta_deviation,
        flow_theta_deviation: flow.state.theta_deviation(),
        ma,
        flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{curvature, endo_eigenvalues, zeta_field};
    use crate::grid::GridSpec;
    use crate::invariants::surface_constants;
    use std::f64::consts::FRAC_PI_2;

    fn torus(size: usize) -> Torus {
        Torus::new(GridSpec::new(2, size).unwrap())
    }

    fn zero(t: &Torus) -> RealField {
        RealField::zeros(*t.grid())
    }

    #[test]
    fn cot_hat_examples() {
        assert!(cot_hat(2.0, 1.0).unwrap().abs() < 1e-15);
        assert!((cot_hat(3.0, 2.0).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(cot_hat(0.0, -1.0), Err(SurfaceError::DegreeZero { .. })));
    }

    #[test]
    fn cot_hat_matches_the_phase() {
        let t = torus(8);
        for b in [[2.0, 1.0], [3.0, 3.0], [1.0, 0.5], [-2.0, 0.5]] {
            let spec = BundleSpec::flat_diagonal(&b);
            let f = curvature(&t, &spec, &zero(&t));
            let sc = surface_constants(&spec.g, &f).unwrap();
            let th = constant_theta_hat(&spec.g, &spec.b).unwrap();
            let c = cot_hat(sc.a1, sc.a2).unwrap();
            assert!((c - th.cos() / th.sin()).abs() < 1e-12, "{b:?}");
        }
    }

    #[test]
    fn residual_vanishes_on_constant_solutions() {
        let t = torus(8);
        for b in [[1.0, 1.0], [2.0, 1.0]] {
            let setup = ma_setup(&BundleSpec::flat_diagonal(&b), zero(&t), 1e-6).unwrap();
            assert!(ma_residual(&t, &setup, &zero(&t)).sup_norm() < 1e-14);
        }
        let setup = ma_setup(&BundleSpec::flat_diagonal(&[2.0, 1.0]), zero(&t), 1e-6).unwrap();
        assert!((setup.cot_hat + 1.0 / 3.0).abs() < 1e-14);
        assert!((setup.margin - 2.0 / 3.0).abs() < 1e-12);
        let phi = t.random_band_limited(2, 2, 0.01).unwrap();
        assert!(ma_residual(&t, &setup, &phi).sup_norm() > 1e-4);
    }

    #[test]
    fn constant_data_converge_immediately() {
        let t = torus(8);
        let setup = ma_setup(&BundleSpec::flat_diagonal(&[2.0, 1.0]), zero(&t), 1e-6).unwrap();
        let out = ma_solve(&t, &setup, &zero(&t), &MaConfig::default()).unwrap();
        assert_eq!(out.status, MaStatus::Converged);
        assert_eq!(out.state.step, 0);
        assert_eq!(out.phi.max(), 0.0);
    }

    #[test]
    fn bump_is_absorbed() {
        let t = torus(16);
        let psi0 = t.random_band_limited(11, 1, 0.05).unwrap();
        let setup = ma_setup(&BundleSpec::flat_diagonal(&[2.0, 1.0]), psi0.clone(), 1e-6).unwrap();
        let out = ma_solve(&t, &setup, &zero(&t), &MaConfig::default()).unwrap();
        assert_eq!(out.status, MaStatus::Converged, "{:?}", out.message);
        assert!(out.state.sup_residual < 1e-8);
        // Exact solution φ = −ψ₀ + const.
        let dev = out.phi.zip_map(&psi0, |a, b| a + b).mean_removed().sup_norm();
        assert!(dev < 1e-6, "{dev}");
        assert!(out.phi.max().abs() < 1e-15);
        assert!(verify_dhym_equivalence(&t, &setup, &setup.frame(&out.phi)) < 1e-7);
        assert!((out.state.volume_ratio - (1.0 + setup.cot_hat.powi(2))).abs() < 1e-10);
        assert!(out.state.min_eig > 0.0);
    }

    #[test]
    fn degenerate_background_fails_at_step_zero() {
        let t = torus(8);
        let psi0 = t.random_band_limited(1, 2, 0.5).unwrap();
        let setup = ma_setup(&BundleSpec::flat_diagonal(&[2.0, 1.0]), psi0, 1e-6).unwrap();
        let out = ma_solve(&t, &setup, &zero(&t), &MaConfig::default()).unwrap();
        assert_eq!(out.status, MaStatus::Failed(MaFailure::PositivityLoss));
        assert_eq!(out.state.step, 0);
    }

    #[test]
    fn max_steps_is_reported() {
        let t = torus(8);
        let psi0 = t.random_band_limited(3, 1, 0.02).unwrap();
        let setup = ma_setup(&BundleSpec::flat_diagonal(&[2.0, 1.0]), psi0, 1e-6).unwrap();
        let cfg = MaConfig {
            max_steps: 2,
            ..MaConfig::default()
        };
        let out = ma_solve(&t, &setup, &zero(&t), &cfg).unwrap();
        assert_eq!(out.status, MaStatus::Failed(MaFailure::MaxSteps));
    }

    #[test]
    fn dhym_residual_forms() {
        let t = torus(8);
        let setup = ma_setup(&BundleSpec::flat_diagonal(&[1.0, 1.0]), zero(&t), 1e-6).unwrap();
        assert!((setup.theta_hat - FRAC_PI_2).abs() < 1e-15);
        assert!(verify_dhym_equivalence(&t, &setup, &zero(&t)) < 1e-15);
        let phi = t.random_band_limited(4, 2, 0.05).unwrap();
        assert!(verify_dhym_equivalence(&t, &setup, &phi) > 1e-3);
    }

    #[test]
    fn reflection_degree_zero_and_dimension() {
        let t = torus(8);
        // Z = (1 + 0.2i)(1 − 3i) = 1.6 − 2.8i has negative phase.
        let s = ma_setup(&BundleSpec::flat_diagonal(&[0.2, -3.0]), zero(&t), 1e-6).unwrap();
        assert!(s.reflected && s.theta_hat > 0.0 && s.margin > 0.0);
        for b in [[1.0, -1.0], [3.0, -3.0]] {
            assert!(matches!(
                ma_setup(&BundleSpec::flat_diagonal(&b), zero(&t), 1e-6),
                Err(SurfaceError::DegreeZero { .. })
            ));
        }
        let t3 = Torus::new(GridSpec::new(3, 8).unwrap());
        assert!(matches!(
            ma_setup(&BundleSpec::flat_diagonal(&[1.0, 1.0, 1.0]), RealField::zeros(*t3.grid()), 1e-6),
            Err(SurfaceError::NotSurface(3))
        ));
    }

    proptest::proptest! {
        // With a_j = arctan λ_j and θ̂ = a₁ + a₂, cot θ̂ + λ_j equals
        // cos a_k / (sin θ̂ cos a_j), so constant classes on a flat surface
        // are stable whenever the degree is nonzero.
        #[test]
        fn constant_classes_are_stable(l1 in -20.0f64..20.0, l2 in -20.0f64..20.0) {
            let (a1, a2) = (l1.atan(), l2.atan());
            let th = a1 + a2;
            proptest::prop_assume!(th.abs() > 1e-3);
            let t = torus(8);
            let s = ma_setup(&BundleSpec::flat_diagonal(&[l1, l2]), zero(&t), 1e-6).unwrap();
            let th = th.abs();
            let (a1, a2) = if s.reflected { (-a1, -a2) } else { (a1, a2) };
            let expect = (a2.cos() / (th.sin() * a1.cos())).min(a1.cos() / (th.sin() * a2.cos()));
            proptest::prop_assert!(s.margin > 0.0);
            proptest::prop_assert!((s.margin - expect).abs() < 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn reflection_conjugates_zeta() {
        let t = torus(8);
        let psi0 = t.random_band_limited(9, 2, 0.05).unwrap();
        let spec = BundleSpec::flat_diagonal(&[2.0, 1.0]);
        let dual = spec.dual();
        let z = zeta_field(&endo_eigenvalues(&spec.g, &curvature(&t, &spec, &psi0)));
        let zd = zeta_field(&endo_eigenvalues(&dual.g, &curvature(&t, &dual, &psi0.map(|x| -x))));
        for (a, b) in z.values().iter().zip(zd.values()) {
            assert!((a.conj() - b).norm() < 1e-12);
        }
        let th = constant_theta_hat(&spec.g, &spec.b).unwrap();
        let thd = constant_theta_hat(&dual.g, &dual.b).unwrap();
        assert!((th + thd).abs() < 1e-14);

        // The dual setup is the same problem in the reflected frame.
        let s = ma_setup(&spec, psi0.clone(), 1e-6).unwrap();
        let sd = ma_setup(&dual, psi0.map(|x| -x), 1e-6).unwrap();
        assert!(sd.reflected && !s.reflected);
        assert_eq!(s.b, sd.b);
        assert!((s.theta_hat - sd.theta_hat).abs() < 1e-14);
        for (a, b) in s.psi0.values().iter().zip(sd.psi0.values()) {
            assert_eq!(*a, *b);
        }
    }

    #[test]
    fn degree_zero_examples() {
        let t = torus(8);
        let spec = BundleSpec::flat_diagonal(&[1.0, -1.0]);
        let s = degree_zero_solve(&t, &spec, &zero(&t)).unwrap();
        assert!(s.phi.sup_norm() < 1e-15 && s.residual < 1e-12);
        let psi0 = t.random_band_limited(5, 2, 0.05).unwrap();
        let s = degree_zero_solve(&t, &spec, &psi0).unwrap();
        assert!(s.residual < 1e-10);
        assert!(s.phi.zip_map(&psi0, |a, b| a + b).mean_removed().sup_norm() < 1e-12);
        // Im ζ = tr_g F = 0 for n = 2.
        let total = s.phi.zip_map(&psi0, |a, b| a + b);
        let z = zeta_field(&endo_eigenvalues(&spec.g, &curvature(&t, &spec, &total)));
        assert!(z.values().iter().all(|z| z.im.abs() < 1e-10));
        assert!(matches!(
            degree_zero_solve(&t, &BundleSpec::flat_diagonal(&[1.0, 1.0]), &zero(&t)),
            Err(SurfaceError::NotDegreeZero { .. })
        ));
    }

    #[test]
    fn ma_checkpoint_round_trip() {
        let t = torus(8);
        let psi0 = t.random_band_limited(3, 1, 0.02).unwrap();
        let setup = ma_setup(&BundleSpec::flat_diagonal(&[2.0, 1.0]), psi0, 1e-6).unwrap();
        let solver = MaSolver::new(&t, setup, MaConfig::default()).unwrap();
        let s0 = solver.initial_state(zero(&t)).unwrap();
        let s1 = solver.step(&s0, solver.cfl_dt(&s0)).unwrap();
        let c = Checkpoint::from_bytes(&solver.checkpoint(&s1).to_bytes()).unwrap();
        let back = solver.restore(&c).unwrap();
        assert_eq!(back.phi.values(), s1.phi.values());
        assert_eq!(back.step, 1);
        let other = MaSolver::new(
            &t,
            solver.setup().clone(),
            MaConfig {
                tol_residual: 1e-9,
                ..MaConfig::default()
            },
        )
        .unwrap();
        assert!(matches!(other.restore(&c), Err(CheckpointError::ConfigMismatch { .. })));
    }
}
