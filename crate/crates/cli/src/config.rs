//! Run configuration: a sectioned `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! [run]
//! mode = flow
//!
//! [problem]
//! n = 2
//! N = 32
//! B.diag = 3 3            # shorthand for a real diagonal
//! B[1,2] = 0.5 -0.25      # entry (row, column), 1-based, as "re im"
//! g.diag = 1 1            # g defaults to the identity
//! psi0 = zero
//! phi0 = band_limited 7 4 0.05     # seed bandwidth amplitude
//! # phi0 = file start.ckpt          # field `phi` of a checkpoint
//!
//! [flow]   FlowConfig fields, e.g. integrator = etdrk4
//! [ma]     MaConfig fields
//! [output] dir, csv, checkpoint, report, checkpoint_every
//! [verify] seed, samples, fault
//! ```
//!
//! Off-diagonal entries given on one side only are completed by Hermitian
//! symmetry. Parsing collects every problem it finds, each tagged with the
//! line it comes from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use dhym_core::battery::Fault;
use dhym_core::flow::{FlowConfig, Integrator};
use dhym_core::grid::{GridSpec, DEFAULT_POINT_BUDGET};
use dhym_core::linalg::MAX_DIM;
use dhym_core::surface::MaConfig;
use dhym_core::{BundleSpec, CMat, KahlerData};
use num_complex::Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Invariants,
    Verify,
    Flow,
    Ma,
    Stability,
    Report,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "invariants" => Mode::Invariants,
            "verify" => Mode::Verify,
            "flow" => Mode::Flow,
            "ma" => Mode::Ma,
            "stability" => Mode::Stability,
            "report" => Mode::Report,
            other => return Err(format!("unknown mode `{other}`")),
        })
    }
}

/// How to build a potential.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldSpec {
    Zero,
    BandLimited { seed: u64, bandwidth: usize, amplitude: f64 },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConfig {
    pub n: usize,
    pub size: usize,
    pub g: CMat,
    pub b: CMat,
    pub psi0: FieldSpec,
    pub phi0: FieldSpec,
    pub point_budget: usize,
}

impl ProblemConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec::with_budget(self.n, self.size, self.point_budget).expect("validated at parse time")
    }

    pub fn spec(&self) -> BundleSpec {
        BundleSpec::new(KahlerData::new(self.g).expect("validated"), self.b).expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub csv: String,
    pub checkpoint: String,
    pub report: String,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("."),
            csv: "diagnostics.csv".into(),
            checkpoint: "final.ckpt".into(),
            report: "report.txt".into(),
            checkpoint_every: 0,
        }
    }
}

impl OutputConfig {
    pub fn csv_path(&self) -> PathBuf {
        self.dir.join(&self.csv)
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(&self.checkpoint)
    }
    pub fn report_path(&self) -> PathBuf {
        self.dir.join(&self.report)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyConfig {
    pub seed: u64,
    pub samples: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 1,
            samples: 1000,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub problem: ProblemConfig,
    pub flow: FlowConfig,
    pub ma: MaConfig,
    pub output: OutputConfig,
    pub verify: VerifyConfig,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub issues: Vec<ConfigIssue>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} configuration error(s):", self.issues.len())?;
        for i in &self.issues {
            writeln!(f, "  {i}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

struct Entry {
    line: usize,
    value: String,
}

/// Key/value pairs by section, before typing.
struct Raw {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

const SECTIONS: [&str; 6] = ["run", "problem", "flow", "ma", "output", "verify"];

struct Parser<'a> {
    raw: &'a mut Raw,
    issues: Vec<ConfigIssue>,
    base: Option<&'a Path>,
}

impl Parser<'_> {
    fn issue(&mut self, line: Option<usize>, msg: impl Into<String>) {
        self.issues.push(ConfigIssue {
            line,
            message: msg.into(),
        });
    }

    fn take(&mut self, section: &str, key: &str) -> Option<Entry> {
        self.raw.sections.get_mut(section).and_then(|s| s.remove(key))
    }

    fn typed<T: FromStr>(&mut self, section: &str, key: &str, what: &str) -> Option<(usize, T)> {
        let e = self.take(section, key)?;
        match e.value.parse::<T>() {
            Ok(v) => Some((e.line, v)),
            Err(_) => {
                self.issue(Some(e.line), format!("{section}.{key}: expected {what}, got `{}`", e.value));
                None
            }
        }
    }

    fn set<T: FromStr>(&mut self, section: &str, key: &str, what: &str, slot: &mut T) {
        if let Some((_, v)) = self.typed(section, key, what) {
            *slot = v;
        }
    }

    fn field_spec(&mut self, key: &str) -> Option<FieldSpec> {
        let e = self.take("problem", key)?;
        let words: Vec<&str> = e.value.split_whitespace().collect();
        let bad = |p: &mut Self, why: &str| {
            p.issue(Some(e.line), format!("problem.{key}: {why}, got `{}`", e.value));
            None
        };
        match words.as_slice() {
            ["zero"] => Some(FieldSpec::Zero),
            ["band_limited", seed, bw, amp] => match (seed.parse(), bw.parse(), amp.parse::<f64>()) {
                (Ok(seed), Ok(bandwidth), Ok(amplitude)) if amplitude.is_finite() => Some(FieldSpec::BandLimited {
                    seed,
                    bandwidth,
                    amplitude,
                }),
                _ => bad(self, "band_limited expects <seed:int> <bandwidth:int> <amplitude:float>"),
            },
            ["file", path] => {
                let p = match self.base {
                    Some(b) if Path::new(path).is_relative() => b.join(path),
                    _ => PathBuf::from(path),
                };
                if !p.exists() {
                    self.issue(Some(e.line), format!("problem.{key}: file `{}` does not exist", p.display()));
                    return None;
                }
                Some(FieldSpec::File(p))
            }
            _ => bad(self, "expected `zero`, `band_limited <seed> <bw> <amp>` or `file <path>`"),
        }
    }

    /// Reads `X.diag` and `X[j,k]` keys into a matrix; `None` if absent.
    fn matrix(&mut self, name: &str, n: usize) -> Option<CMat> {
        let keys: Vec<String> = self
            .raw
            .sections
            .get("problem")
            .map(|s| {
                s.keys()
                    .filter(|k| k.starts_with(&format!("{name}.")) || k.starts_with(&format!("{name}[")))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default();
        if keys.is_empty() {
            return None;
        }
        let mut given: [[Option<(usize, Complex64)>; MAX_DIM]; MAX_DIM] = [[None; MAX_DIM]; MAX_DIM];
        for key in keys {
            let e = self.take("problem", &key).unwrap();
            if key == format!("{name}.diag") {
                let vals: Result<Vec<f64>, _> = e.value.split_whitespace().map(str::parse).collect();
                match vals {
                    Ok(v) if v.len() == n => {
                        for (j, x) in v.into_iter().enumerate() {
                            given[j][j] = Some((e.line, Complex64::new(x, 0.0)));
                        }
                    }
                    Ok(v) => self.issue(
                        Some(e.line),
                        format!("{name}.diag: expected {n} values, got {}", v.len()),
                    ),
                    Err(_) => self.issue(Some(e.line), format!("{name}.diag: expected numbers, got `{}`", e.value)),
                }
                continue;
            }
            let Some((j, k)) = parse_index(&key, name) else {
                self.issue(Some(e.line), format!("unknown key `{key}` in [problem]"));
                continue;
            };
            if j == 0 || k == 0 || j > n || k > n {
                self.issue(Some(e.line), format!("{key}: index out of range for n={n}"));
                continue;
            }
            let nums: Result<Vec<f64>, _> = e.value.split_whitespace().map(str::parse).collect();
            match nums.as_deref() {
                Ok([re]) => given[j - 1][k - 1] = Some((e.line, Complex64::new(*re, 0.0))),
                Ok([re, im]) => given[j - 1][k - 1] = Some((e.line, Complex64::new(*re, *im))),
                _ => self.issue(Some(e.line), format!("{key}: expected `re` or `re im`, got `{}`", e.value)),
            }
        }
        let mut m = CMat::zeros(n);
        for j in 0..n {
            for k in 0..n {
                match (given[j][k], given[k][j]) {
                    (Some((l, a)), Some((_, b))) => {
                        if (a - b.conj()).norm() > 1e-12 * (1.0 + a.norm()) {
                            if j <= k {
                                let msg = if j == k {
                                    format!("{name}[{},{}] = {a} must be real on the diagonal (Hermitian)", j + 1, j + 1)
                                } else {
                                    format!(
                                        "{name}[{},{}] = {a} and {name}[{},{}] = {b} are not conjugate; {name} must be Hermitian",
                                        j + 1,
                                        k + 1,
                                        k + 1,
                                        j + 1
                                    )
                                };
                                self.issue(Some(l), msg);
                            }
                        }
                        m[(j, k)] = a;
                    }
                    (Some((_, a)), None) => m[(j, k)] = a,
                    (None, Some((_, b))) => m[(j, k)] = b.conj(),
                    (None, None) if name == "g" && j == k => m[(j, k)] = Complex64::new(1.0, 0.0),
                    (None, None) => {}
                }
            }
        }
        Some(m)
    }
}

fn parse_index(key: &str, name: &str) -> Option<(usize, usize)> {
    let inner = key.strip_prefix(name)?.strip_prefix('[')?.strip_suffix(']')?;
    let (a, b) = inner.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// Parses and validates a configuration. `base` resolves relative file
/// references.
pub fn parse_config_in(text: &str, base: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let mut raw = Raw {
        sections: BTreeMap::new(),
    };
    let mut issues = Vec::new();
    let mut section = String::from("run");
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                issues.push(ConfigIssue {
                    line: Some(line_no),
                    message: format!("unknown section [{name}]"),
                });
            }
            section = name.to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            issues.push(ConfigIssue {
                line: Some(line_no),
                message: format!("expected `key = value`, got `{line}`"),
            });
            continue;
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        let sec = raw.sections.entry(section.clone()).or_default();
        if let Some(prev) = sec.get(&k) {
            issues.push(ConfigIssue {
                line: Some(line_no),
                message: format!("duplicate key `{k}` in [{section}] (first on line {})", prev.line),
            });
            continue;
        }
        sec.insert(
            k,
            Entry {
                line: line_no,
                value: v,
            },
        );
    }

    let mut p = Parser {
        raw: &mut raw,
        issues,
        base,
    };

    let mode = p.typed::<Mode>("run", "mode", "one of invariants|verify|flow|ma|stability|report").map(|x| x.1);

    // [problem]
    let n_entry = p.typed::<usize>("problem", "n", "integer");
    let size_entry = p.typed::<usize>("problem", "N", "integer");
    let mut point_budget = DEFAULT_POINT_BUDGET;
    p.set("problem", "point_budget", "integer", &mut point_budget);
    let mut n = 2;
    match n_entry {
        Some((l, v)) if !(1..=MAX_DIM).contains(&v) => p.issue(Some(l), format!("n must lie in 1..=3, got {v}")),
        Some((_, v)) => n = v,
        None if p.issues.iter().all(|i| !i.message.starts_with("problem.n:")) => {
            p.issue(None, "missing required key problem.n")
        }
        None => {}
    }
    let mut size = 8;
    match size_entry {
        Some((l, v)) => {
            if v % 2 != 0 {
                p.issue(Some(l), "N must be even");
            } else if v < 8 {
                p.issue(Some(l), format!("N must be at least 8, got {v}"));
            } else if let Err(e) = GridSpec::with_budget(n, v, point_budget) {
                p.issue(Some(l), e.to_string());
            } else {
                size = v;
            }
        }
        None if p.issues.iter().all(|i| !i.message.starts_with("problem.N:")) => {
            p.issue(None, "missing required key problem.N")
        }
        None => {}
    }
    let g = p.matrix("g", n).unwrap_or_else(|| CMat::identity(n));
    let b = p.matrix("B", n).unwrap_or_else(|| CMat::zeros(n));
    if KahlerData::new(g).is_err() {
        p.issue(None, "g must be Hermitian positive definite");
    }
    let psi0 = p.field_spec("psi0").unwrap_or(FieldSpec::Zero);
    let phi0 = p.field_spec("phi0").unwrap_or(FieldSpec::Zero);
    for (key, f) in [("psi0", &psi0), ("phi0", &phi0)] {
        if let FieldSpec::BandLimited { bandwidth, .. } = f {
            if 2 * bandwidth >= size {
                p.issue(None, format!("problem.{key}: bandwidth {bandwidth} must be below N/2 = {}", size / 2));
            }
        }
    }

    // [flow]
    let mut flow = FlowConfig::default();
    p.set("flow", "dt_safety", "float", &mut flow.dt_safety);
    if let Some(e) = p.take("flow", "integrator") {
        match e.value.parse::<Integrator>() {
            Ok(i) => flow.integrator = i,
            Err(_) => p.issue(
                Some(e.line),
                format!("flow.integrator: expected euler|rk4|etdrk4, got `{}`", e.value),
            ),
        }
    }
    p.set("flow", "tol_theta", "float", &mut flow.tol_theta);
    p.set("flow", "max_steps", "integer", &mut flow.max_steps);
    p.set("flow", "monitor_cadence", "integer", &mut flow.monitor_cadence);
    p.set("flow", "slack", "float", &mut flow.slack);
    p.set("flow", "blowup_factor", "float", &mut flow.blowup_factor);
    p.set("flow", "require_hypercritical", "true|false", &mut flow.require_hypercritical);
    p.set("flow", "drift_tol", "float", &mut flow.drift_tol);
    p.set("flow", "dt_growth", "float", &mut flow.dt_growth);
    p.set("flow", "dt_max", "float", &mut flow.dt_max);
    for v in flow.violations() {
        p.issue(None, format!("[flow] {v}"));
    }

    // [ma]
    let mut ma = MaConfig::default();
    p.set("ma", "eps_pos", "float", &mut ma.eps_pos);
    p.set("ma", "tol_residual", "float", &mut ma.tol_residual);
    p.set("ma", "max_steps", "integer", &mut ma.max_steps);
    p.set("ma", "dt_safety", "float", &mut ma.dt_safety);
    p.set("ma", "dt_growth", "float", &mut ma.dt_growth);
    p.set("ma", "dt_max", "float", &mut ma.dt_max);
    p.set("ma", "max_halvings", "integer", &mut ma.max_halvings);
    p.set("ma", "monitor_cadence", "integer", &mut ma.monitor_cadence);
    for v in ma.violations() {
        p.issue(None, format!("[ma] {v}"));
    }

    // [output]
    let mut output = OutputConfig::default();
    if let Some(e) = p.take("output", "dir") {
        output.dir = match base {
            Some(b) if Path::new(&e.value).is_relative() => b.join(&e.value),
            _ => PathBuf::from(&e.value),
        };
    }
    p.set("output", "csv", "file name", &mut output.csv);
    p.set("output", "checkpoint", "file name", &mut output.checkpoint);
    p.set("output", "report", "file name", &mut output.report);
    p.set("output", "checkpoint_every", "integer", &mut output.checkpoint_every);

    // [verify]
    let mut verify = VerifyConfig::default();
    p.set("verify", "seed", "integer", &mut verify.seed);
    p.set("verify", "samples", "integer", &mut verify.samples);
    if let Some(e) = p.take("verify", "fault") {
        if e.value != "none" {
            match e.value.parse::<Fault>() {
                Ok(f) => verify.fault = Some(f),
                Err(m) => p.issue(Some(e.line), format!("verify.fault: {m}")),
            }
        }
    }
    if verify.samples == 0 {
        p.issue(None, "verify.samples must be positive");
    }

    // Anything left over is unknown.
    let leftovers: Vec<(String, String, usize)> = p
        .raw
        .sections
        .iter()
        .flat_map(|(s, m)| m.iter().map(move |(k, e)| (s.clone(), k.clone(), e.line)))
        .collect();
    for (s, k, l) in leftovers {
        if SECTIONS.contains(&s.as_str()) {
            p.issue(Some(l), format!("unknown key `{k}` in [{s}]"));
        }
    }

    let mut issues = p.issues;
    if issues.is_empty() {
        Ok(RunConfig {
            mode,
            problem: ProblemConfig {
                n,
                size,
                g,
                b,
                psi0,
                phi0,
                point_budget,
            },
            flow,
            ma,
            output,
            verify,
        })
    } else {
        issues.sort_by_key(|i| i.line.unwrap_or(usize::MAX));
        Err(ConfigError { issues })
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    parse_config_in(text, None)
}
