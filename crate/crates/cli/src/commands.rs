//! Command dispatch. Each command prints to the given writer and returns a
//! [`CmdError`] carrying the process exit code on anything but success.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use dhym_core::battery::run_battery;
use dhym_core::checkpoint::{checkpoint_read, checkpoint_write, Checkpoint, CheckpointError};
use dhym_core::flow::{check_hypercritical, DiagnosticsRecord, Flow, FlowError, FlowStatus};
use dhym_core::invariants::{constant_theta_hat, fmt_f, invariant_report, InvariantError, Stability};
use dhym_core::surface::{
    degree_zero_solve, ma_setup, MaFailure, MaRecord, MaSolver, MaStatus, SurfaceError, MA_CSV_COLUMNS,
};
use dhym_core::{invariants, RealField, Torus};
use thiserror::Error;

use crate::config::{parse_config_in, FieldSpec, Mode, RunConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_MAX_STEPS: i32 = 2;
pub const EXIT_PRECONDITION: i32 = 3;
pub const EXIT_MONITOR: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CmdError {
            code,
            message: message.into(),
        }
    }

    fn precondition(message: impl Into<String>) -> Self {
        Self::new(EXIT_PRECONDITION, message)
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new(EXIT_IO, format!("{}: {e}", path.display()))
    }
}

impl From<CheckpointError> for CmdError {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io { .. } => EXIT_IO,
            _ => EXIT_PRECONDITION,
        };
        CmdError::new(code, e.to_string())
    }
}

impl From<FlowError> for CmdError {
    fn from(e: FlowError) -> Self {
        CmdError::precondition(e.to_string())
    }
}

impl From<InvariantError> for CmdError {
    fn from(e: InvariantError) -> Self {
        CmdError::precondition(e.to_string())
    }
}

impl From<SurfaceError> for CmdError {
    fn from(e: SurfaceError) -> Self {
        CmdError::precondition(e.to_string())
    }
}

/// One invocation as assembled from the command line.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub config: PathBuf,
    /// Overrides `[run] mode`.
    pub mode: Option<Mode>,
    pub resume: Option<PathBuf>,
    /// Overrides `[output] dir`.
    pub out: Option<PathBuf>,
}

/// Loads the configuration and runs the selected command.
pub fn execute(inv: &Invocation, stdout: &mut dyn Write) -> Result<(), CmdError> {
    let text = fs::read_to_string(&inv.config).map_err(|e| CmdError::io(&inv.config, e))?;
    let base = inv.config.parent().filter(|p| !p.as_os_str().is_empty());
    let mut cfg = parse_config_in(&text, base).map_err(|e| CmdError::precondition(e.to_string().trim_end()))?;
    if let Some(out) = &inv.out {
        cfg.output.dir = out.clone();
    }
    let mode = inv
        .mode
        .or(cfg.mode)
        .ok_or_else(|| CmdError::precondition("no command given and no `mode` in [run]"))?;
    if inv.resume.is_some() && !matches!(mode, Mode::Flow | Mode::Ma) {
        return Err(CmdError::precondition("--resume only applies to flow and ma"));
    }
    match mode {
        Mode::Invariants => cmd_invariants(&cfg, stdout),
        Mode::Verify => cmd_verify(&cfg, stdout),
        Mode::Flow => cmd_flow(&cfg, inv.resume.as_deref(), stdout),
        Mode::Ma => cmd_ma(&cfg, inv.resume.as_deref(), stdout),
        Mode::Stability => cmd_stability(&cfg, stdout),
        Mode::Report => cmd_report(&cfg, stdout),
    }
}

fn print(stdout: &mut dyn Write, text: &str) -> Result<(), CmdError> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CmdError::new(EXIT_IO, format!("stdout: {e}")))
}

fn ensure_dir(dir: &Path) -> Result<(), CmdError> {
    fs::create_dir_all(dir).map_err(|e| CmdError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CmdError> {
    if let Some(d) = path.parent() {
        ensure_dir(d)?;
    }
    fs::write(path, text).map_err(|e| CmdError::io(path, e))
}

fn build_field(torus: &Torus, spec: &FieldSpec) -> Result<RealField, CmdError> {
    match spec {
        FieldSpec::Zero => Ok(RealField::zeros(*torus.grid())),
        FieldSpec::BandLimited {
            seed,
            bandwidth,
            amplitude,
        } => torus
            .random_band_limited(*seed, *bandwidth, *amplitude)
            .map_err(|e| CmdError::precondition(e.to_string())),
        FieldSpec::File(path) => Ok(checkpoint_read(path)?.real_field("phi", torus.grid())?),
    }
}

pub fn cmd_invariants(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CmdError> {
    let torus = Torus::new(cfg.problem.grid());
    let spec = cfg.problem.spec();
    let psi0 = build_field(&torus, &cfg.problem.psi0)?;
    let phi0 = build_field(&torus, &cfg.problem.phi0)?;
    let phi = phi0.zip_map(&psi0, |a, b| a + b);
    let report = invariant_report(&torus, &spec, &phi)?;
    let text = report.to_key_value();
    print(stdout, &text)?;
    write_file(&cfg.output.report_path(), &text)
}

pub fn cmd_verify(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CmdError> {
    let v = &cfg.verify;
    let results = run_battery(v.seed, v.samples, v.fault);
    let mut text = String::new();
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(text, "{tag} {:<24} {:<24} ({})", r.name, fmt_f(r.value), r.criterion);
    }
    print(stdout, &text)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CmdError::new(EXIT_FAILURE, format!("oracle failure: {}", failed.join(", "))))
    }
}

/// Streams CSV rows, remembering the first write error.
struct CsvSink {
    path: PathBuf,
    out: BufWriter<fs::File>,
    error: Option<io::Error>,
}

impl CsvSink {
    fn create(path: PathBuf, header: &str) -> Result<Self, CmdError> {
        if let Some(d) = path.parent() {
            ensure_dir(d)?;
        }
        let file = fs::File::create(&path).map_err(|e| CmdError::io(&path, e))?;
        let mut sink = CsvSink {
            path,
            out: BufWriter::new(file),
            error: None,
        };
        sink.line(header);
        Ok(sink)
    }

    fn line(&mut self, row: &str) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{row}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<(), CmdError> {
        if let Some(e) = self.error.take() {
            return Err(CmdError::io(&self.path, e));
        }
        self.out.flush().map_err(|e| CmdError::io(&self.path, e))
    }
}

fn periodic_checkpoint_path(cfg: &RunConfig, step: usize) -> PathBuf {
    cfg.output.dir.join(format!("step_{step:08}.ckpt"))
}

pub fn cmd_flow(cfg: &RunConfig, resume: Option<&Path>, stdout: &mut dyn Write) -> Result<(), CmdError> {
    let torus = Torus::new(cfg.problem.grid());
    let flow = Flow::new(&torus, cfg.problem.spec(), cfg.flow.clone())?;
    let start = match resume {
        Some(path) => checkpoint_read(path)?.into_flow_state(&flow)?,
        None => {
            let psi0 = build_field(&torus, &cfg.problem.psi0)?;
            let phi0 = build_field(&torus, &cfg.problem.phi0)?;
            let s = flow.initial_state(phi0.zip_map(&psi0, |a, b| a + b))?;
            check_hypercritical(&flow, &s)?;
            s
        }
    };

    let mut csv = CsvSink::create(cfg.output.csv_path(), &DiagnosticsRecord::csv_header())?;
    let every = cfg.output.checkpoint_every;
    let mut ckpt_error = None;
    let outcome = flow.run(start, &mut |state, rec| {
        csv.line(&rec.csv_row());
        if every > 0 && state.step > 0 && state.step % every == 0 && ckpt_error.is_none() {
            let path = periodic_checkpoint_path(cfg, state.step);
            if let Err(e) = checkpoint_write(&path, &Checkpoint::from_flow_state(state, &cfg.flow)) {
                ckpt_error = Some(e);
            }
        }
    });
    csv.finish()?;
    if let Some(e) = ckpt_error {
        return Err(e.into());
    }
    checkpoint_write(
        &cfg.output.checkpoint_path(),
        &Checkpoint::from_flow_state(&outcome.state, &cfg.flow),
    )?;

    let s = &outcome.state;
    let mut text = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(text, "{k} = {v}");
    };
    put("route", "flow".into());
    put("status", format!("{:?}", outcome.status));
    put("steps", s.step.to_string());
    put("t", fmt_f(s.t));
    put("volume", fmt_f(s.summary.volume));
    put("abs_z", fmt_f(s.summary.z.norm()));
    put("theta_hat", fmt_f(s.theta_hat));
    put("sup_theta_dev", fmt_f(s.theta_deviation()));
    put("sup_phi_mean_removed", fmt_f(s.normalized_potential().sup_norm()));
    put("retries", outcome.retries.to_string());
    if let Some(m) = &outcome.message {
        put("message", m.clone());
    }
    print(stdout, &text)?;
    write_file(&cfg.output.report_path(), &text)?;

    let why = || outcome.message.clone().unwrap_or_default();
    match outcome.status {
        FlowStatus::Converged => Ok(()),
        FlowStatus::MaxSteps => Err(CmdError::new(EXIT_MAX_STEPS, format!("step budget exhausted {}", why()))),
        FlowStatus::MonitorViolation => Err(CmdError::new(EXIT_MONITOR, format!("monitor violation: {}", why()))),
        FlowStatus::NonFinite => Err(CmdError::new(EXIT_MONITOR, format!("non-finite state: {}", why()))),
    }
}

pub fn cmd_ma(cfg: &RunConfig, resume: Option<&Path>, stdout: &mut dyn Write) -> Result<(), CmdError> {
    if cfg.problem.n != 2 {
        return Err(CmdError::precondition("MA route requires n=2"));
    }
    let torus = Torus::new(cfg.problem.grid());
    let spec = cfg.problem.spec();
    let psi0 = build_field(&torus, &cfg.problem.psi0)?;
    let setup = match ma_setup(&spec, psi0.clone(), cfg.ma.eps_pos) {
        Ok(s) => s,
        Err(SurfaceError::DegreeZero { .. }) => {
            let sol = degree_zero_solve(&torus, &spec, &psi0)?;
            let text = format!(
                "route = poisson\nstatus = Converged\nsup_residual = {}\n",
                fmt_f(sol.residual)
            );
            print(stdout, &text)?;
            write_file(&cfg.output.report_path(), &text)?;
            let ckpt = Checkpoint {
                route: dhym_core::checkpoint::Route::Ma,
                n: 2,
                size: cfg.problem.size,
                t: 0.0,
                step: 0,
                dt: 0.0,
                config_hash: cfg.ma.hash(),
                gradf_ref: 0.0,
                hypercritical: false,
                fields: vec![("phi".into(), sol.phi.into_values())],
            };
            checkpoint_write(&cfg.output.checkpoint_path(), &ckpt)?;
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let solver = MaSolver::new(&torus, setup, cfg.ma.clone())?;
    let start = match resume {
        Some(path) => solver.restore(&checkpoint_read(path)?)?,
        None => {
            let phi0 = build_field(&torus, &cfg.problem.phi0)?;
            solver.initial_state(solver.setup().frame(&phi0))?
        }
    };

    let mut csv = CsvSink::create(cfg.output.csv_path(), &MA_CSV_COLUMNS.join(","))?;
    let every = cfg.output.checkpoint_every;
    let mut ckpt_error = None;
    let outcome = solver.run(start, &mut |state, rec: &MaRecord| {
        csv.line(&rec.csv_row());
        if every > 0 && state.step > 0 && state.step % every == 0 && ckpt_error.is_none() {
            if let Err(e) = checkpoint_write(&periodic_checkpoint_path(cfg, state.step), &solver.checkpoint(state)) {
                ckpt_error = Some(e);
            }
        }
    });
    csv.finish()?;
    if let Some(e) = ckpt_error {
        return Err(e.into());
    }
    checkpoint_write(&cfg.output.checkpoint_path(), &solver.checkpoint(&outcome.state))?;

    let s = &outcome.state;
    let setup = solver.setup();
    let mut text = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(text, "{k} = {v}");
    };
    put("route", "ma".into());
    put("status", outcome.status.to_string());
    put("steps", s.step.to_string());
    put("t", fmt_f(s.t));
    put("theta_hat", fmt_f(if setup.reflected { -setup.theta_hat } else { setup.theta_hat }));
    put("cot_theta_hat", fmt_f(setup.cot_hat));
    put("reflected", setup.reflected.to_string());
    put("stability_margin", fmt_f(setup.margin));
    put("sup_residual", fmt_f(s.sup_residual));
    put("min_eig_m", fmt_f(s.min_eig));
    put("volume_ratio", fmt_f(s.volume_ratio));
    if let Some(m) = &outcome.message {
        put("message", m.clone());
    }
    print(stdout, &text)?;
    write_file(&cfg.output.report_path(), &text)?;

    let why = outcome.message.clone().unwrap_or_default();
    match outcome.status {
        MaStatus::Converged => Ok(()),
        MaStatus::Failed(MaFailure::MaxSteps) => Err(CmdError::new(EXIT_MAX_STEPS, format!("step budget exhausted {why}"))),
        MaStatus::Failed(f) => Err(CmdError::new(EXIT_MONITOR, format!("{f:?}: {why}"))),
    }
}

pub fn cmd_stability(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CmdError> {
    let spec = cfg.problem.spec();
    let theta_hat = constant_theta_hat(&spec.g, &spec.b)?;
    let st = invariants::stability_check(&spec.g, &spec.b, theta_hat);
    let mut text = format!("theta_hat = {}\n", fmt_f(theta_hat));
    match &st {
        Stability::DegreeZero => text.push_str("stable = true\nstability_note = degree zero\n"),
        Stability::Checked {
            stable,
            margin,
            coefficient,
            reflected,
        } => {
            let _ = writeln!(text, "stable = {stable}");
            let _ = writeln!(text, "stability_margin = {}", fmt_f(*margin));
            let _ = writeln!(text, "stability_coefficient = {}", fmt_f(*coefficient));
            let _ = writeln!(text, "reflected = {reflected}");
        }
        Stability::NotApplicable(why) => {
            let _ = writeln!(text, "stability_note = {why}");
        }
    }
    print(stdout, &text)?;
    write_file(&cfg.output.report_path(), &text)?;
    match st {
        Stability::Checked { stable: false, margin, .. } => {
            Err(CmdError::precondition(format!("class is not stable (margin {})", fmt_f(margin))))
        }
        _ => Ok(()),
    }
}

/// first / last / min / max of every numeric column.
pub fn summarize_csv(text: &str) -> Result<String, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or("empty CSV")?.split(',').collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(format!("row {}: expected {} cells, got {}", i + 1, header.len(), cells.len()));
        }
        for (c, cell) in cells.iter().enumerate() {
            if let Ok(x) = cell.parse::<f64>() {
                cols[c].push(x);
            }
        }
        rows += 1;
    }
    let mut out = format!("rows = {rows}\n");
    let _ = writeln!(out, "{:<16} {:>24} {:>24} {:>24} {:>24}", "column", "first", "last", "min", "max");
    for (name, v) in header.iter().zip(&cols) {
        let (Some(first), Some(last)) = (v.first(), v.last()) else {
            continue;
        };
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(
            out,
            "{:<16} {:>24} {:>24} {:>24} {:>24}",
            name,
            format!("{first:e}"),
            format!("{last:e}"),
            format!("{min:e}"),
            format!("{max:e}")
        );
    }
    Ok(out)
}

pub fn cmd_report(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CmdError> {
    let path = cfg.output.csv_path();
    let text = fs::read_to_string(&path).map_err(|e| CmdError::io(&path, e))?;
    let table = summarize_csv(&text).map_err(|e| CmdError::precondition(format!("{}: {e}", path.display())))?;
    print(stdout, &table)?;
    write_file(&cfg.output.dir.join("summary.txt"), &table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(CmdError::from(InvariantError::ZeroCharge).code, EXIT_PRECONDITION);
        assert_eq!(CmdError::from(FlowError::NonFinite).code, EXIT_PRECONDITION);
        let io = CheckpointError::Io {
            path: "x".into(),
            source: io::Error::other("boom"),
        };
        assert_eq!(CmdError::from(io).code, EXIT_IO);
        assert_eq!(CmdError::from(CheckpointError::BadMagic).code, EXIT_PRECONDITION);
    }

    #[test]
    fn summary_table_skips_text_columns() {
        let t = summarize_csv("route,step,t\nma,0,0.0\nma,1,0.5\n").unwrap();
        assert!(t.starts_with("rows = 2\n"));
        assert!(t.contains("step") && t.contains("5e-1"));
        assert!(!t.lines().any(|l| l.starts_with("route")));
        assert!(summarize_csv("a,b\n1\n").is_err());
        assert!(summarize_csv("").is_err());
    }
}
