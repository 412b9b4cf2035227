//! Line bundle mean curvature flow φ̇ = θ − θ̂.
//!
//! Three steppers are available. `Euler` and `Rk4` are explicit in physical
//! space with the parabolic CFL step. `Etdrk4` splits the right-hand side as
//! `Λ·Δ_g φ + N(φ)` with the constant Λ = max η⁻¹ relative to g, integrates
//! the linear part exactly in Fourier space (Cox–Matthews exponential time
//! differencing) and treats the remainder with a fourth-order Runge–Kutta
//! quadrature. It keeps fixed points exact and allows steps far above the
//! CFL limit.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{eta_inverse_pointwise, theta_field, vmod_field, zeta_pointwise, BundleSpec, ThetaEvaluator};
use crate::grid::{integrate, pairwise_sum, EigenField, RealField};
use crate::invariants::{
    grad_f_norm_sq_pointwise, h_norm_sq_pointwise, jet_eigenvalues, lift_phase, mean_curvature_pointwise,
    phase_flags_from_min_abs, pointwise_summary, CurvatureJet, InvariantError, PointwiseSummary,
};
use crate::linalg::CMat;
use crate::spectral::{Spectrum, Torus};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Rk4,
    Etdrk4,
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Integrator::Euler => "euler",
            Integrator::Rk4 => "rk4",
            Integrator::Etdrk4 => "etdrk4",
        })
    }
}

impl FromStr for Integrator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Integrator::Euler),
            "rk4" => Ok(Integrator::Rk4),
            "etdrk4" => Ok(Integrator::Etdrk4),
            other => Err(format!("unknown integrator '{other}' (expected euler, rk4 or etdrk4)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// CFL safety factor σ.
    pub dt_safety: f64,
    pub integrator: Integrator,
    /// Stop once sup|θ − θ̂| falls below this.
    pub tol_theta: f64,
    pub max_steps: usize,
    /// Steps between diagnostics records.
    pub monitor_cadence: usize,
    /// Per-step slack of the monotonicity monitors.
    pub slack: f64,
    /// Halt once max|∇F|² exceeds this multiple of its initial value.
    pub blowup_factor: f64,
    pub require_hypercritical: bool,
    /// Largest tolerated per-step change of θ̂.
    pub drift_tol: f64,
    /// Exponential stepper only: per-step growth of dt and its ceiling.
    pub dt_growth: f64,
    pub dt_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            dt_safety: 0.8,
            integrator: Integrator::Etdrk4,
            tol_theta: 1e-8,
            max_steps: 20_000,
            monitor_cadence: 10,
            slack: 1e-10,
            blowup_factor: 1e3,
            require_hypercritical: false,
            drift_tol: 1e-9,
            dt_growth: 1.5,
            dt_max: 2.0,
        }
    }
}

impl FlowConfig {
    /// All violated constraints, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.dt_safety > 0.0 && self.dt_safety <= 1.0) {
            v.push(format!("dt_safety must lie in (0, 1] (got {})", self.dt_safety));
        }
        for (name, x) in [
            ("tol_theta", self.tol_theta),
            ("slack", self.slack),
            ("blowup_factor", self.blowup_factor),
            ("drift_tol", self.drift_tol),
            ("dt_max", self.dt_max),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{name} must be positive (got {x})"));
            }
        }
        if !(self.dt_growth >= 1.0 && self.dt_growth.is_finite()) {
            v.push(format!("dt_growth must be at least 1 (got {})", self.dt_growth));
        }
        if self.monitor_cadence == 0 {
            v.push("monitor_cadence must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(FlowError::Config(v.join("; ")))
        }
    }

    /// Canonical text form; hashed into checkpoints.
    pub fn canonical(&self) -> String {
        format!(
            "dt_safety={:?};integrator={};tol_theta={:?};monitor_cadence={};slack={:?};blowup_factor={:?};\
             require_hypercritical={};drift_tol={:?};dt_growth={:?};dt_max={:?}",
            self.dt_safety,
            self.integrator,
            self.tol_theta,
            self.monitor_cadence,
            self.slack,
            self.blowup_factor,
            self.require_hypercritical,
            self.drift_tol,
            self.dt_growth,
            self.dt_max
        )
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("potential lives on a different grid than the solver")]
    GridMismatch,
    #[error("potential has non-finite entries")]
    NonFinite,
    #[error("run ended with status {0:?} instead of converging")]
    NotConverged(FlowStatus),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowStatus {
    Converged,
    MaxSteps,
    MonitorViolation,
    NonFinite,
}

/// One accepted point of the flow with its cached derived fields.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub phi: RealField,
    pub t: f64,
    pub step: usize,
    /// Step size that produced this state (0 before the first step).
    pub dt: f64,
    pub theta_hat: f64,
    pub summary: PointwiseSummary,
    pub lambda: EigenField,
    pub theta: RealField,
    pub v: RealField,
    /// max|∇F|² of the run's initial potential.
    pub gradf_ref: f64,
    /// Whether the run started in the hypercritical phase.
    pub hypercritical: bool,
}

impl FlowState {
    /// sup|θ − θ̂|.
    pub fn theta_deviation(&self) -> f64 {
        (self.summary.max_theta - self.theta_hat).max(self.theta_hat - self.summary.min_theta)
    }

    /// The potential normalized to mean zero.
    pub fn normalized_potential(&self) -> RealField {
        self.phi.mean_removed()
    }
}

/// Scalar trace of one accepted step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub volume: f64,
    pub z: Complex64,
    pub theta_hat: f64,
    pub min_theta: f64,
    pub max_theta: f64,
    pub max_v: f64,
    pub min_lambda: f64,
    pub theta_deviation: f64,
}

impl TracePoint {
    fn of(s: &FlowState) -> Self {
        TracePoint {
            step: s.step,
            t: s.t,
            dt: s.dt,
            volume: s.summary.volume,
            z: s.summary.z,
            theta_hat: s.theta_hat,
            min_theta: s.summary.min_theta,
            max_theta: s.summary.max_theta,
            max_v: s.summary.max_v,
            min_lambda: s.summary.min_lambda,
            theta_deviation: s.theta_deviation(),
        }
    }
}

/// Column order of the diagnostics CSV; part of the output contract.
pub const CSV_COLUMNS: [&str; 17] = [
    "t",
    "dt",
    "V",
    "abs_Z",
    "theta_hat",
    "min_theta",
    "max_theta",
    "sup_theta_dev",
    "max_v",
    "max_H2",
    "max_gradF2",
    "min_lambda",
    "max_lambda",
    "min_eig_omega",
    "kappa_max",
    "step",
    "dVdt_model",
];

/// Version of [`CSV_COLUMNS`].
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub dt: f64,
    pub volume: f64,
    pub abs_z: f64,
    pub theta_hat: f64,
    pub min_theta: f64,
    pub max_theta: f64,
    pub sup_theta_dev: f64,
    pub max_v: f64,
    pub max_h2: f64,
    pub max_grad_f2: f64,
    pub min_lambda: f64,
    pub max_lambda: f64,
    /// Surfaces only.
    pub min_eig_omega: Option<f64>,
    pub kappa_max: f64,
    pub step: usize,
    /// −∫|H|²_η v, the predicted dV/dt.
    pub dvdt_model: f64,
}

impl DiagnosticsRecord {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let f = |x: f64| format!("{x:?}");
        [
            f(self.t),
            f(self.dt),
            f(self.volume),
            f(self.abs_z),
            f(self.theta_hat),
            f(self.min_theta),
            f(self.max_theta),
            f(self.sup_theta_dev),
            f(self.max_v),
            f(self.max_h2),
            f(self.max_grad_f2),
            f(self.min_lambda),
            f(self.max_lambda),
            self.min_eig_omega.map(f).unwrap_or_default(),
            f(self.kappa_max),
            self.step.to_string(),
            f(self.dvdt_model),
        ]
        .join(",")
    }

    pub fn is_finite(&self) -> bool {
        [
            self.t,
            self.dt,
            self.volume,
            self.abs_z,
            self.theta_hat,
            self.min_theta,
            self.max_theta,
            self.sup_theta_dev,
            self.max_v,
            self.max_h2,
            self.max_grad_f2,
            self.min_lambda,
            self.max_lambda,
            self.min_eig_omega.unwrap_or(0.0),
            self.kappa_max,
            self.dvdt_model,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Full CSV text for a series of records.
pub fn diagnostics_csv(records: &[DiagnosticsRecord]) -> String {
    let mut s = DiagnosticsRecord::csv_header();
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct FlowOutcome {
    pub status: FlowStatus,
    pub state: FlowState,
    pub records: Vec<DiagnosticsRecord>,
    /// One entry per accepted step, starting with the initial state.
    pub trace: Vec<TracePoint>,
    /// Human-readable cause for non-converged endings.
    pub message: Option<String>,
    /// Steps that were only accepted after halving dt.
    pub retries: usize,
}

enum StepError {
    NonFinite,
    Monitor(String),
}

/// Solver context for one bundle on one grid.
pub struct Flow<'a> {
    torus: &'a Torus,
    spec: BundleSpec,
    cfg: FlowConfig,
    lap: Vec<f64>,
    nyquist: Vec<bool>,
    theta_eval: ThetaEvaluator,
}

impl<'a> Flow<'a> {
    pub fn new(torus: &'a Torus, spec: BundleSpec, cfg: FlowConfig) -> Result<Self, FlowError> {
        cfg.validate()?;
        if spec.dim() != torus.grid().dim() {
            return Err(FlowError::GridMismatch);
        }
        let lap = torus.laplacian_symbols(spec.g.inverse());
        let theta_eval = ThetaEvaluator::new(&spec.g);
        Ok(Flow {
            torus,
            spec,
            cfg,
            lap,
            nyquist: torus.nyquist_mask(),
            theta_eval,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &BundleSpec {
        &self.spec
    }

    pub fn torus(&self) -> &Torus {
        self.torus
    }

    /// Evaluates the caches of φ and lifts θ̂ on the branch of mean θ.
    fn evaluate(&self, phi: RealField, t: f64, step: usize, dt: f64) -> Result<FlowState, FlowError> {
        if *phi.grid() != *self.torus.grid() {
            return Err(FlowError::GridMismatch);
        }
        if !phi.is_finite() {
            return Err(FlowError::NonFinite);
        }
        let jet = CurvatureJet::curvature(self.torus, &self.spec, &self.torus.forward(&phi));
        let lambda = jet_eigenvalues(&self.spec.g, &jet, *self.torus.grid());
        let theta = theta_field(&lambda);
        let v = vmod_field(&lambda);
        let summary = pointwise_summary(&lambda, &theta, &v);
        if !(summary.volume.is_finite() && summary.min_theta.is_finite() && summary.max_theta.is_finite()) {
            return Err(FlowError::NonFinite);
        }
        let theta_hat = lift_phase(summary.z, summary.mean_theta, self.spec.dim())?;
        Ok(FlowState {
            phi,
            t,
            step,
            dt,
            theta_hat,
            summary,
            lambda,
            theta,
            v,
            gradf_ref: 0.0,
            hypercritical: false,
        })
    }

    /// The state at t = 0, with the monitor references of a fresh run.
    pub fn initial_state(&self, phi0: RealField) -> Result<FlowState, FlowError> {
        let mut s = self.evaluate(phi0, 0.0, 0, 0.0)?;
        s.hypercritical = phase_flags_from_min_abs(s.summary.min_abs_theta, self.spec.dim()).hypercritical;
        s.gradf_ref = self.record(&s).max_grad_f2;
        Ok(s)
    }

    /// Rebuilds a state from checkpointed data.
    pub fn restore(
        &self,
        phi: RealField,
        t: f64,
        step: usize,
        dt: f64,
        gradf_ref: f64,
        hypercritical: bool,
    ) -> Result<FlowState, FlowError> {
        let mut s = self.evaluate(phi, t, step, dt)?;
        s.gradf_ref = gradf_ref;
        s.hypercritical = hypercritical;
        Ok(s)
    }

    /// φ̇ = θ − θ̂.
    pub fn flow_rhs(&self, state: &FlowState) -> RealField {
        let th = state.theta_hat;
        state.theta.map(|x| x - th)
    }

    /// Largest eigenvalue of η⁻¹ relative to g over the grid: 1/(1 + min λ²).
    pub fn lambda_max(&self, state: &FlowState) -> f64 {
        let m = state.lambda.min_abs();
        1.0 / (1.0 + m * m)
    }

    /// σ dx² / (π² n Λ), capped at ten times its Λ = 1 value.
    pub fn cfl_dt(&self, state: &FlowState) -> f64 {
        let n = self.spec.dim() as f64;
        let dx = self.torus.grid().dx();
        let base = self.cfg.dt_safety * dx * dx / (std::f64::consts::PI.powi(2) * n);
        (base / self.lambda_max(state)).min(10.0 * base)
    }

    fn next_dt(&self, state: &FlowState) -> f64 {
        let cfl = self.cfl_dt(state);
        match self.cfg.integrator {
            Integrator::Etdrk4 if state.dt > 0.0 => (state.dt * self.cfg.dt_growth).min(self.cfg.dt_max).max(cfl),
            _ => cfl,
        }
    }

    /// θ of the potential with spectrum `u`.
    fn theta_of_spectrum(&self, u: &Spectrum) -> Result<RealField, StepError> {
        let hess = self.torus.hessian(u);
        let b = self.spec.b;
        let ev = &self.theta_eval;
        let th = RealField::from_index_fn(*self.torus.grid(), |p| ev.theta(&(hess.at(p) + b)));
        if th.is_finite() {
            Ok(th)
        } else {
            Err(StepError::NonFinite)
        }
    }

    /// Advances one step of size `dt`, refreshing every cache.
    pub fn flow_step(&self, state: &FlowState, dt: f64) -> Result<FlowState, FlowError> {
        self.advance(state, dt).map_err(|e| match e {
            StepError::NonFinite => FlowError::NonFinite,
            StepError::Monitor(m) => FlowError::Precondition(m),
        })
    }

    fn advance(&self, state: &FlowState, dt: f64) -> Result<FlowState, StepError> {
        let phi = match self.cfg.integrator {
            Integrator::Euler => self.euler(state, dt),
            Integrator::Rk4 => self.rk4(state, dt)?,
            Integrator::Etdrk4 => self.etdrk4(state, dt)?,
        };
        if !phi.is_finite() {
            return Err(StepError::NonFinite);
        }
        let mut next = self.evaluate(phi, state.t + dt, state.step + 1, dt).map_err(|e| match e {
            FlowError::NonFinite => StepError::NonFinite,
            other => StepError::Monitor(other.to_string()),
        })?;
        next.gradf_ref = state.gradf_ref;
        next.hypercritical = state.hypercritical;
        Ok(next)
    }

    /// Spectrum of θ − θ̂ with the Nyquist modes removed. The derivative
    /// symbols vanish there, so without the projection aliasing would pile
    /// up in modes the flow can never damp.
    fn velocity(&self, theta: &RealField, theta_hat: f64) -> Spectrum {
        let mut out = self.torus.forward(theta);
        out[0] -= theta_hat * self.torus.grid().points() as f64;
        out.par_iter_mut().zip(self.nyquist.par_iter()).for_each(|(o, &m)| {
            if m {
                *o = Complex64::new(0.0, 0.0);
            }
        });
        out
    }

    /// The projected velocity as a grid field: the discrete φ̇.
    pub fn projected_rhs(&self, state: &FlowState) -> RealField {
        self.torus.inverse_real(self.velocity(&state.theta, state.theta_hat))
    }

    fn euler(&self, state: &FlowState, dt: f64) -> RealField {
        let v = self.projected_rhs(state);
        state.phi.add_scaled(&v, dt)
    }

    fn rk4(&self, state: &FlowState, dt: f64) -> Result<RealField, StepError> {
        let th = state.theta_hat;
        let speed = |u: &Spectrum| -> Result<Spectrum, StepError> { Ok(self.velocity(&self.theta_of_spectrum(u)?, th)) };
        let axpy = |u: &Spectrum, k: &Spectrum, s: f64| -> Spectrum {
            u.par_iter().zip(k.par_iter()).map(|(a, b)| a + s * b).collect()
        };
        let u = self.torus.forward(&state.phi);
        let k1 = self.velocity(&state.theta, th);
        let k2 = speed(&axpy(&u, &k1, 0.5 * dt))?;
        let k3 = speed(&axpy(&u, &k2, 0.5 * dt))?;
        let k4 = speed(&axpy(&u, &k3, dt))?;
        let next: Spectrum = (0..u.len())
            .into_par_iter()
            .map(|k| u[k] + dt / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]))
            .collect();
        Ok(self.torus.inverse_real(next))
    }

    fn etdrk4(&self, state: &FlowState, h: f64) -> Result<RealField, StepError> {
        let big_lambda = self.lambda_max(state);
        let lap = &self.lap;
        // N(u) = P(θ(u) − θ̂) − Λ s u, so Nyquist modes are stationary.
        let th = state.theta_hat;
        let nonlinear = |u: &Spectrum| -> Result<Spectrum, StepError> {
            let mut out = self.velocity(&self.theta_of_spectrum(u)?, th);
            out.par_iter_mut().zip(u.par_iter()).enumerate().for_each(|(k, (o, x))| {
                *o -= big_lambda * lap[k] * *x;
            });
            Ok(out)
        };
        let next = etdrk4_step(&self.torus.forward(&state.phi), |k| big_lambda * lap[k], h, nonlinear)?;
        Ok(self.torus.inverse_real(next))
    }

    /// Full diagnostics of a state, including the derivative norms.
    pub fn record(&self, state: &FlowState) -> DiagnosticsRecord {
        let n = self.spec.dim();
        let g = &self.spec.g;
        let jet = CurvatureJet::with_gradient(self.torus, &self.spec, &self.torus.forward(&state.phi));
        let vv = state.v.values();
        let rot = Complex64::from_polar(1.0, -state.theta_hat);
        let per_point: Vec<(f64, f64, f64, f64)> = (0..vv.len())
            .into_par_iter()
            .map(|p| {
                let f = jet.f_at(p);
                let ei = eta_inverse_pointwise(g, &f);
                let df: Vec<CMat> = (0..n).map(|l| jet.df_at(p, l)).collect();
                let h = mean_curvature_pointwise(&ei, &df);
                let h2 = h_norm_sq_pointwise(&h[..n], &ei);
                let z = zeta_pointwise(state.lambda.at(p));
                let kappa = (rot * z / z.norm()).re;
                (h2, grad_f_norm_sq_pointwise(g, &df), h2 * vv[p], kappa)
            })
            .collect();
        let max_h2 = per_point.iter().fold(0.0f64, |m, x| m.max(x.0));
        let max_grad_f2 = per_point.iter().fold(0.0f64, |m, x| m.max(x.1));
        let weighted: Vec<f64> = per_point.iter().map(|x| x.2).collect();
        let kappa_max = per_point.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.3));
        let s = &state.summary;
        let min_eig_omega = (n == 2).then(|| {
            let c = state.theta_hat.cos() / state.theta_hat.sin();
            c + s.min_lambda
        });
        DiagnosticsRecord {
            t: state.t,
            dt: state.dt,
            volume: s.volume,
            abs_z: s.z.norm(),
            theta_hat: state.theta_hat,
            min_theta: s.min_theta,
            max_theta: s.max_theta,
            sup_theta_dev: state.theta_deviation(),
            max_v: s.max_v,
            max_h2,
            max_grad_f2,
            min_lambda: s.min_lambda,
            max_lambda: s.max_lambda,
            min_eig_omega,
            kappa_max,
            step: state.step,
            dvdt_model: -pairwise_sum(&weighted) / vv.len() as f64,
        }
    }

    /// Monotonicity and drift monitors between consecutive accepted states.
    fn step_monitors(&self, prev: &FlowState, next: &FlowState) -> Option<String> {
        let tol = self.cfg.slack;
        let (a, b) = (&prev.summary, &next.summary);
        if b.volume > a.volume + tol {
            return Some(format!("V increased from {:?} to {:?}", a.volume, b.volume));
        }
        if b.min_theta < a.min_theta - tol {
            return Some(format!("min θ decreased from {:?} to {:?}", a.min_theta, b.min_theta));
        }
        if b.max_theta > a.max_theta + tol {
            return Some(format!("max θ increased from {:?} to {:?}", a.max_theta, b.max_theta));
        }
        if prev.hypercritical {
            if b.max_v > a.max_v + tol {
                return Some(format!("max v increased from {:?} to {:?}", a.max_v, b.max_v));
            }
            if b.min_lambda <= 0.0 {
                return Some(format!("min λ reached {:?} in a hypercritical run", b.min_lambda));
            }
        }
        let drift = (next.theta_hat - prev.theta_hat).abs();
        if drift > self.cfg.drift_tol {
            return Some(format!("θ̂ drifted by {drift:e} in one step"));
        }
        None
    }

    fn record_monitors(&self, state: &FlowState, rec: &DiagnosticsRecord) -> Option<String> {
        if !rec.is_finite() {
            return Some("non-finite diagnostics".into());
        }
        if rec.kappa_max > 1.0 + self.cfg.slack {
            return Some(format!("κ reached {:?} > 1", rec.kappa_max));
        }
        let limit = self.cfg.blowup_factor * state.gradf_ref;
        if rec.max_grad_f2 > limit {
            return Some(format!(
                "singularity suspected: max|∇F|² = {:e} exceeds {:e} ({}x its initial value)",
                rec.max_grad_f2, limit, self.cfg.blowup_factor
            ));
        }
        None
    }

    fn converged(&self, s: &FlowState) -> bool {
        s.theta_deviation() < self.cfg.tol_theta
    }

    /// Runs from `start` until convergence, the step budget, or a monitor
    /// failure. `observer` sees every diagnostics record as it is produced.
    pub fn run(&self, start: FlowState, observer: &mut dyn FnMut(&FlowState, &DiagnosticsRecord)) -> FlowOutcome {
        let cadence = self.cfg.monitor_cadence;
        let mut state = start;
        let mut trace = vec![TracePoint::of(&state)];
        let mut records = Vec::new();
        let mut retries = 0;
        let finish = |status, state: FlowState, records, trace, message, retries| FlowOutcome {
            status,
            state,
            records,
            trace,
            message,
            retries,
        };
        if state.step % cadence == 0 {
            let rec = self.record(&state);
            observer(&state, &rec);
            records.push(rec);
            if let Some(m) = self.record_monitors(&state, &rec) {
                return finish(FlowStatus::MonitorViolation, state, records, trace, Some(m), retries);
            }
        }
        loop {
            if self.converged(&state) {
                break;
            }
            if state.step >= self.cfg.max_steps {
                return self.close(FlowStatus::MaxSteps, state, records, trace, None, retries, observer);
            }
            let dt = self.next_dt(&state);
            let mut attempt = self.attempt(&state, dt);
            if let Err(StepError::Monitor(_)) = &attempt {
                retries += 1;
                attempt = self.attempt(&state, 0.5 * dt);
            }
            match attempt {
                Ok((next, rec)) => {
                    state = next;
                    trace.push(TracePoint::of(&state));
                    if let Some(rec) = rec {
                        observer(&state, &rec);
                        records.push(rec);
                    }
                }
                Err(StepError::NonFinite) => {
                    let m = format!("non-finite values at step {}", state.step + 1);
                    return self.close(FlowStatus::NonFinite, state, records, trace, Some(m), retries, observer);
                }
                Err(StepError::Monitor(m)) => {
                    return self.close(FlowStatus::MonitorViolation, state, records, trace, Some(m), retries, observer);
                }
            }
        }
        self.close(FlowStatus::Converged, state, records, trace, None, retries, observer)
    }

    fn attempt(&self, state: &FlowState, dt: f64) -> Result<(FlowState, Option<DiagnosticsRecord>), StepError> {
        let next = self.advance(state, dt)?;
        if let Some(m) = self.step_monitors(state, &next) {
            return Err(StepError::Monitor(m));
        }
        if next.step % self.cfg.monitor_cadence == 0 {
            let rec = self.record(&next);
            if let Some(m) = self.record_monitors(&next, &rec) {
                return Err(StepError::Monitor(m));
            }
            return Ok((next, Some(rec)));
        }
        Ok((next, None))
    }

    /// Appends a closing record for the final state if it has none yet.
    #[allow(clippy::too_many_arguments)]
    fn close(
        &self,
        status: FlowStatus,
        state: FlowState,
        mut records: Vec<DiagnosticsRecord>,
        trace: Vec<TracePoint>,
        message: Option<String>,
        retries: usize,
        observer: &mut dyn FnMut(&FlowState, &DiagnosticsRecord),
    ) -> FlowOutcome {
        if records.last().map(|r| r.step) != Some(state.step) {
            let rec = self.record(&state);
            observer(&state, &rec);
            records.push(rec);
        }
        FlowOutcome {
            status,
            state,
            records,
            trace,
            message,
            retries,
        }
    }
}

/// Cox–Matthews coefficients for the linear symbol z = hc at one mode,
/// all divided by h.
#[derive(Clone, Copy, Debug)]
struct EtdCoefficients {
    e: f64,
    e2: f64,
    q: f64,
    f1: f64,
    f2: f64,
    f3: f64,
}

impl EtdCoefficients {
    #[inline]
    fn new(z: f64) -> Self {
        let (p1, p2, p3) = phi_functions(z);
        let (h1, _, _) = phi_functions(0.5 * z);
        EtdCoefficients {
            e: z.exp(),
            e2: (0.5 * z).exp(),
            q: 0.5 * h1,
            f1: p1 - 3.0 * p2 + 4.0 * p3,
            f2: p2 - 2.0 * p3,
            f3: -p2 + 4.0 * p3,
        }
    }
}

/// One Cox–Matthews step of size `h` for û' = c_k û + N(û), with the
/// linear symbol `c(k)` and the remainder `nonlinear`.
pub(crate) fn etdrk4_step<E>(
    u: &Spectrum,
    symbol: impl Fn(usize) -> f64 + Sync,
    h: f64,
    nonlinear: impl Fn(&Spectrum) -> Result<Spectrum, E>,
) -> Result<Spectrum, E> {
    let coeff = |k: usize| EtdCoefficients::new(h * symbol(k));
    let nu = nonlinear(u)?;
    let a: Spectrum = (0..u.len())
        .into_par_iter()
        .map(|k| {
            let c = coeff(k);
            c.e2 * u[k] + h * c.q * nu[k]
        })
        .collect();
    let na = nonlinear(&a)?;
    let b: Spectrum = (0..u.len())
        .into_par_iter()
        .map(|k| {
            let c = coeff(k);
            c.e2 * u[k] + h * c.q * na[k]
        })
        .collect();
    let nb = nonlinear(&b)?;
    drop(b);
    let c_stage: Spectrum = (0..u.len())
        .into_par_iter()
        .map(|k| {
            let c = coeff(k);
            c.e2 * a[k] + h * c.q * (2.0 * nb[k] - nu[k])
        })
        .collect();
    drop(a);
    let nc = nonlinear(&c_stage)?;
    drop(c_stage);
    Ok((0..u.len())
        .into_par_iter()
        .map(|k| {
            let c = coeff(k);
            c.e * u[k] + h * (c.f1 * nu[k] + 2.0 * c.f2 * (na[k] + nb[k]) + c.f3 * nc[k])
        })
        .collect())
}

/// φ₁, φ₂, φ₃ of the exponential integrators; Taylor series near zero.
#[inline]
fn phi_functions(z: f64) -> (f64, f64, f64) {
    if z.abs() < 1.0 {
        // φ_k(z) = Σ_m z^m / (m + k)!
        let mut p = [0.0f64; 3];
        for (k, out) in p.iter_mut().enumerate() {
            let mut term = 1.0 / (1..=k + 1).map(|i| i as f64).product::<f64>();
            let mut sum = term;
            for m in 1..20 {
                term *= z / (m + k + 1) as f64;
                sum += term;
            }
            *out = sum;
        }
        (p[0], p[1], p[2])
    } else {
        let p1 = z.exp_m1() / z;
        let p2 = (p1 - 1.0) / z;
        let p3 = (p2 - 0.5) / z;
        (p1, p2, p3)
    }
}

/// Convenience wrapper: fresh run from φ₀.
pub fn run_flow(torus: &Torus, spec: &BundleSpec, phi0: RealField, cfg: &FlowConfig) -> Result<FlowOutcome, FlowError> {
    let flow = Flow::new(torus, spec.clone(), cfg.clone())?;
    let start = flow.initial_state(phi0)?;
    check_hypercritical(&flow, &start)?;
    Ok(flow.run(start, &mut |_, _| {}))
}

/// Rejects non-hypercritical initial data when the config demands it,
/// naming the offending grid extremum.
pub fn check_hypercritical(flow: &Flow<'_>, start: &FlowState) -> Result<(), FlowError> {
    if !flow.config().require_hypercritical || start.hypercritical {
        return Ok(());
    }
    let n = flow.spec().dim();
    let (p, m) = start
        .theta
        .values()
        .iter()
        .enumerate()
        .map(|(p, t)| (p, t.abs()))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    let x = flow.torus().grid().coords(p);
    Err(FlowError::Precondition(format!(
        "initial data not hypercritical: min|θ| = {m} at point {p} (coords {:?}) is not above (n-1)π/2 = {}",
        &x[..2 * n],
        (n as f64 - 1.0) * FRAC_PI_2
    )))
}

/// Two converged runs and the sup-deviation of their mean-removed difference.
pub struct UniquenessReport {
    pub deviation: f64,
    pub a: FlowOutcome,
    pub b: FlowOutcome,
}

pub fn uniqueness_experiment(
    torus: &Torus,
    spec: &BundleSpec,
    phi_a: RealField,
    phi_b: RealField,
    cfg: &FlowConfig,
) -> Result<UniquenessReport, FlowError> {
    let a = run_flow(torus, spec, phi_a, cfg)?;
    if a.status != FlowStatus::Converged {
        return Err(FlowError::NotConverged(a.status));
    }
    let b = run_flow(torus, spec, phi_b, cfg)?;
    if b.status != FlowStatus::Converged {
        return Err(FlowError::NotConverged(b.status));
    }
    let diff = a.state.phi.zip_map(&b.state.phi, |x, y| x - y);
    let m = integrate(&diff);
    let deviation = diff.values().iter().fold(0.0f64, |acc, d| acc.max((d - m).abs()));
    Ok(UniquenessReport { deviation, a, b })
}

/// Centered (three-point, non-uniform) estimate of dV/dt at trace index `i`.
pub fn centered_volume_slope(trace: &[TracePoint], i: usize) -> Option<f64> {
    if i == 0 || i + 1 >= trace.len() {
        return None;
    }
    let (a, b, c) = (&trace[i - 1], &trace[i], &trace[i + 1]);
    let h1 = b.t - a.t;
    let h2 = c.t - b.t;
    Some((h1 * h1 * c.volume - h2 * h2 * a.volume + (h2 * h2 - h1 * h1) * b.volume) / (h1 * h2 * (h1 + h2)))
}
