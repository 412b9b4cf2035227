//! Checkpoint files for the flow and Monge-Ampère solvers.
//!
//! Layout: the magic line `DHYM-CKPT v1`, then UTF-8 `key=value` header lines
//! terminated by `end`, then the declared fields as row-major little-endian
//! f64 payloads in the order of the `fields` key. Floats in the header use
//! Rust's shortest round-trip formatting, so a re-read is bit exact.
//!
//! Writes go to a sibling temporary file that is renamed into place, so a
//! failed write never leaves a partial checkpoint behind.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::flow::{Flow, FlowConfig, FlowError, FlowState};
use crate::grid::{GridSpec, RealField};

pub const MAGIC: &str = "DHYM-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic line)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(String),
    #[error("corrupt header line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint was written with config hash {found:016x}, current config hashes to {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("checkpoint route is {found}, expected {expected}")]
    RouteMismatch { expected: Route, found: Route },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Which solver wrote the file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Flow,
    Ma,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Flow => "flow",
            Route::Ma => "ma",
        })
    }
}

impl FromStr for Route {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flow" => Ok(Route::Flow),
            "ma" => Ok(Route::Ma),
            other => Err(format!("unknown route `{other}`")),
        }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn config_hash(cfg: &FlowConfig) -> u64 {
    fnv1a(cfg.canonical().as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub route: Route,
    pub n: usize,
    pub size: usize,
    pub t: f64,
    pub step: usize,
    pub dt: f64,
    pub config_hash: u64,
    pub gradf_ref: f64,
    pub hypercritical: bool,
    /// Named grid fields, each of length N^(2n).
    pub fields: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_flow_state(state: &FlowState, cfg: &FlowConfig) -> Self {
        let grid = state.phi.grid();
        Checkpoint {
            route: Route::Flow,
            n: grid.dim(),
            size: grid.size(),
            t: state.t,
            step: state.step,
            dt: state.dt,
            config_hash: config_hash(cfg),
            gradf_ref: state.gradf_ref,
            hypercritical: state.hypercritical,
            fields: vec![("phi".into(), state.phi.values().to_vec())],
        }
    }

    pub fn field(&self, name: &str) -> Option<&[f64]> {
        self.fields.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_slice())
    }

    /// The named field as a grid function on `grid`.
    pub fn real_field(&self, name: &str, grid: &GridSpec) -> Result<RealField, CheckpointError> {
        if grid.dim() != self.n || grid.size() != self.size {
            return Err(CheckpointError::Dimension(format!(
                "file has n={} N={}, solver has n={} N={}",
                self.n,
                self.size,
                grid.dim(),
                grid.size()
            )));
        }
        let v = self
            .field(name)
            .ok_or_else(|| CheckpointError::Dimension(format!("field `{name}` missing")))?;
        RealField::from_values(*grid, v.to_vec()).map_err(|e| CheckpointError::Dimension(e.to_string()))
    }

    /// Rebuilds a flow state, refusing files from a different route or config.
    pub fn into_flow_state(&self, flow: &Flow<'_>) -> Result<FlowState, CheckpointError> {
        if self.route != Route::Flow {
            return Err(CheckpointError::RouteMismatch {
                expected: Route::Flow,
                found: self.route,
            });
        }
        let expected = config_hash(flow.config());
        if expected != self.config_hash {
            return Err(CheckpointError::ConfigMismatch {
                expected,
                found: self.config_hash,
            });
        }
        let phi = self.real_field("phi", flow.torus().grid())?;
        Ok(flow.restore(phi, self.t, self.step, self.dt, self.gradf_ref, self.hypercritical)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let names: Vec<&str> = self.fields.iter().map(|(k, _)| k.as_str()).collect();
        let mut head = format!("{MAGIC} v{VERSION}\n");
        let mut kv = |k: &str, v: String| {
            head.push_str(k);
            head.push('=');
            head.push_str(&v);
            head.push('\n');
        };
        kv("route", self.route.to_string());
        kv("n", self.n.to_string());
        kv("N", self.size.to_string());
        kv("t", format!("{:?}", self.t));
        kv("step", self.step.to_string());
        kv("dt", format!("{:?}", self.dt));
        kv("config_hash", format!("{:016x}", self.config_hash));
        kv("gradf_ref", format!("{:?}", self.gradf_ref));
        kv("hypercritical", self.hypercritical.to_string());
        kv("fields", names.join(","));
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for (_, v) in &self.fields {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0;
        let mut next_line = |line_no: usize| -> Result<String, CheckpointError> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| CheckpointError::Header {
                line: line_no,
                msg: "unterminated header".into(),
            })?;
            let s = std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Header {
                line: line_no,
                msg: "header is not UTF-8".into(),
            })?;
            pos += end + 1;
            Ok(s.to_string())
        };

        let magic = next_line(1).map_err(|_| CheckpointError::BadMagic)?;
        let version = magic.strip_prefix(MAGIC).map(str::trim).ok_or(CheckpointError::BadMagic)?;
        if version != format!("v{VERSION}") {
            return Err(CheckpointError::Version(version.to_string()));
        }

        let mut header = Vec::new();
        let mut line_no = 1;
        loop {
            line_no += 1;
            let line = next_line(line_no)?;
            if line == "end" {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Header {
                line: line_no,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            header.push((line_no, k.to_string(), v.to_string()));
        }
        let get = |key: &str| -> Result<(usize, &str), CheckpointError> {
            header
                .iter()
                .find(|(_, k, _)| k == key)
                .map(|(l, _, v)| (*l, v.as_str()))
                .ok_or_else(|| CheckpointError::Header {
                    line: line_no,
                    msg: format!("missing key `{key}`"),
                })
        };
        fn parse<T: FromStr>(key: &str, (line, v): (usize, &str)) -> Result<T, CheckpointError> {
            v.parse().map_err(|_| CheckpointError::Header {
                line,
                msg: format!("bad value `{v}` for `{key}`"),
            })
        }

        let route: Route = parse("route", get("route")?)?;
        let n: usize = parse("n", get("n")?)?;
        let size: usize = parse("N", get("N")?)?;
        let grid = GridSpec::new(n, size).map_err(|e| CheckpointError::Dimension(e.to_string()))?;
        let t: f64 = parse("t", get("t")?)?;
        let step: usize = parse("step", get("step")?)?;
        let dt: f64 = parse("dt", get("dt")?)?;
        let (l, h) = get("config_hash")?;
        let config_hash = u64::from_str_radix(h, 16).map_err(|_| CheckpointError::Header {
            line: l,
            msg: format!("bad config hash `{h}`"),
        })?;
        let gradf_ref: f64 = parse("gradf_ref", get("gradf_ref")?)?;
        let hypercritical: bool = parse("hypercritical", get("hypercritical")?)?;
        let (_, names) = get("fields")?;
        let names: Vec<String> = names.split(',').filter(|s| !s.is_empty()).map(String::from).collect();

        let points = grid.points();
        let expected = names.len() * points * 8;
        let payload = &bytes[pos..];
        if payload.len() < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(CheckpointError::Dimension(format!(
                "payload has {} bytes, header declares {expected}",
                payload.len()
            )));
        }
        let fields = names
            .into_iter()
            .enumerate()
            .map(|(i, name)| {
                let chunk = &payload[i * points * 8..(i + 1) * points * 8];
                let v = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                (name, v)
            })
            .collect();
        Ok(Checkpoint {
            route,
            n,
            size,
            t,
            step,
            dt,
            config_hash,
            gradf_ref,
            hypercritical,
            fields,
        })
    }
}

pub fn checkpoint_write(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.map_err(io)
}

pub fn checkpoint_read(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BundleSpec;
    use crate::spectral::Torus;

    fn sample() -> Checkpoint {
        let grid = GridSpec::new(1, 8).unwrap();
        let t = Torus::new(grid);
        let phi = t.random_band_limited(3, 2, 0.1).unwrap();
        Checkpoint {
            route: Route::Flow,
            n: 1,
            size: 8,
            t: 0.1 + 0.2,
            step: 17,
            dt: 1.0 / 3.0,
            config_hash: config_hash(&FlowConfig::default()),
            gradf_ref: 12.5,
            hypercritical: false,
            fields: vec![("phi".into(), phi.into_values())],
        }
    }

    #[test]
    fn bytes_round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.t.to_bits(), c.t.to_bits());
        assert_eq!(back.dt.to_bits(), c.dt.to_bits());
        for (a, b) in back.field("phi").unwrap().iter().zip(c.field("phi").unwrap()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, c);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        checkpoint_write(&path, &c).unwrap();
        assert_eq!(checkpoint_read(&path).unwrap(), c);
        assert!(!dir.path().join("a.ckpt.partial").exists());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 8, bytes.len() - 300] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(CheckpointError::Truncated { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        // Cut inside the header.
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..30]),
            Err(CheckpointError::Header { .. })
        ));
    }

    #[test]
    fn header_errors() {
        let text = String::from_utf8_lossy(&sample().to_bytes()[..]).into_owned();
        let head_len = text.find("end\n").unwrap() + 4;
        let bytes = sample().to_bytes();
        let payload = &bytes[head_len..];
        let with_head = |h: &str| {
            let mut v = h.as_bytes().to_vec();
            v.extend_from_slice(payload);
            v
        };
        let head = &text[..head_len];

        assert!(matches!(
            Checkpoint::from_bytes(&with_head(&head.replace("DHYM-CKPT", "NOPE"))),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&with_head(&head.replace("v1", "v9"))),
            Err(CheckpointError::Version(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&with_head(&head.replace("step=17", "step=x"))),
            Err(CheckpointError::Header { line: 6, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&with_head(&head.replace("N=8", "N=10"))),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&with_head(&head.replace("N=8", "N=7"))),
            Err(CheckpointError::Dimension(_))
        ));
    }

    #[test]
    fn flow_state_checks_grid_and_config() {
        let t = Torus::new(GridSpec::new(1, 16).unwrap());
        let spec = BundleSpec::flat_diagonal(&[2.0]);
        let cfg = FlowConfig::default();
        let flow = Flow::new(&t, spec.clone(), cfg.clone()).unwrap();
        let s = flow.initial_state(t.random_band_limited(1, 3, 0.05).unwrap()).unwrap();
        let c = Checkpoint::from_flow_state(&s, &cfg);
        let back = c.into_flow_state(&flow).unwrap();
        assert_eq!(back.phi.values(), s.phi.values());
        assert_eq!(back.gradf_ref, s.gradf_ref);

        let other = FlowConfig {
            tol_theta: 1e-9,
            ..cfg.clone()
        };
        let flow2 = Flow::new(&t, spec.clone(), other).unwrap();
        assert!(matches!(c.into_flow_state(&flow2), Err(CheckpointError::ConfigMismatch { .. })));

        let t8 = Torus::new(GridSpec::new(1, 8).unwrap());
        let flow3 = Flow::new(&t8, spec, cfg).unwrap();
        assert!(matches!(c.into_flow_state(&flow3), Err(CheckpointError::Dimension(_))));
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let t = Torus::new(GridSpec::new(1, 16).unwrap());
        let spec = BundleSpec::flat_diagonal(&[2.0]);
        let cfg = FlowConfig {
            monitor_cadence: 3,
            ..FlowConfig::default()
        };
        let flow = Flow::new(&t, spec, cfg.clone()).unwrap();
        let phi0 = t.random_band_limited(5, 3, 0.05).unwrap();
        let full = flow.run(flow.initial_state(phi0.clone()).unwrap(), &mut |_, _| {});

        // Stop after 7 steps, checkpoint, resume from the file.
        let mut s = flow.initial_state(phi0).unwrap();
        let mut dt = flow.cfl_dt(&s);
        for _ in 0..7 {
            let next = flow.flow_step(&s, dt).unwrap();
            dt = (next.dt * cfg.dt_growth).min(cfg.dt_max).max(flow.cfl_dt(&next));
            s = next;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        checkpoint_write(&path, &Checkpoint::from_flow_state(&s, &cfg)).unwrap();
        let resumed = checkpoint_read(&path).unwrap().into_flow_state(&flow).unwrap();
        let rest = flow.run(resumed, &mut |_, _| {});

        assert_eq!(rest.status, full.status);
        let tail: Vec<_> = full.records.iter().filter(|r| r.step > 7).cloned().collect();
        let rest_tail: Vec<_> = rest.records.iter().filter(|r| r.step > 7).cloned().collect();
        assert!(!tail.is_empty());
        assert_eq!(tail, rest_tail);
        assert_eq!(rest.state.phi.values(), full.state.phi.values());
    }
}
