use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dhym_core::checkpoint::{checkpoint_read, Route};

fn dhym(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhym"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.split_once(" = ").filter(|(k, _)| *k == key).map(|(_, v)| v))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

const FLOW: &str = "\
[problem]
n = 2
N = 8
B.diag = 3 3
phi0 = band_limited 7 2 0.05
[flow]
require_hypercritical = true
monitor_cadence = 1
";

#[test]
fn invariants_of_the_ample_class() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), "[problem]\nn = 2\nN = 8\nB.diag = 3 3\n").unwrap();
    let o = dhym(d.path(), &["invariants", "--config", "c.cfg", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert_eq!(value(&s, "z_re"), "-8.0");
    assert_eq!(value(&s, "z_im"), "6.0");
    assert!((value(&s, "volume").parse::<f64>().unwrap() - 10.0).abs() < 1e-12);
    assert_eq!(value(&s, "hypercritical"), "true");
    assert_eq!(value(&s, "ample"), "true");
    let th: f64 = value(&s, "theta_hat").parse().unwrap();
    assert!((th - 2.0 * 3f64.atan()).abs() < 1e-14);
    assert_eq!(fs::read_to_string(d.path().join("o/report.txt")).unwrap(), s);
}

#[test]
fn invariants_of_a_degree_zero_class() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), "[problem]\nn = 2\nN = 8\nB.diag = 1 -1\n").unwrap();
    let o = dhym(d.path(), &["invariants", "--config", "c.cfg", "--out", "o"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert_eq!(value(&s, "a1").parse::<f64>().unwrap(), 0.0);
    assert_eq!(value(&s, "degree_zero"), "true");
}

#[test]
fn stability_margin_of_diag_2_1() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), "[problem]\nn = 2\nN = 8\nB.diag = 2 1\n").unwrap();
    let o = dhym(d.path(), &["stability", "--config", "c.cfg", "--out", "o"]);
    assert!(o.status.success());
    let m: f64 = value(&stdout(&o), "stability_margin").parse().unwrap();
    assert!((m - 2.0 / 3.0).abs() < 1e-10);
}

#[test]
fn ma_rejects_other_dimensions() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), "[problem]\nn = 3\nN = 8\nB.diag = 1 1 1\n").unwrap();
    let o = dhym(d.path(), &["ma", "--config", "c.cfg", "--out", "o"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("MA route requires n=2"));
    assert!(!d.path().join("o/final.ckpt").exists());
}

#[test]
fn config_errors_exit_with_every_issue() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), "[problem]\nn = 2\nN = 7\nbogus = 1\n").unwrap();
    let o = dhym(d.path(), &["invariants", "--config", "c.cfg"]);
    assert_eq!(o.status.code(), Some(3));
    let e = stderr(&o);
    assert!(e.contains("line 3: N must be even"), "{e}");
    assert!(e.contains("line 4: unknown key `bogus`"), "{e}");
}

#[test]
fn missing_config_is_an_io_error() {
    let d = tempfile::tempdir().unwrap();
    let o = dhym(d.path(), &["invariants", "--config", "nope.cfg"]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn mode_comes_from_config_when_no_subcommand() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), "[run]\nmode = stability\n[problem]\nn = 2\nN = 8\nB.diag = 2 1\n").unwrap();
    let o = dhym(d.path(), &["--config", "c.cfg", "--out", "o"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("stability_margin"));
}

#[test]
fn verify_passes_and_names_injected_faults() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("ok.cfg"), "[problem]\nn = 1\nN = 8\n[verify]\nseed = 3\nsamples = 200\n").unwrap();
    let o = dhym(d.path(), &["verify", "--config", "ok.cfg"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("PASS")).count(), 9);

    fs::write(
        d.path().join("bad.cfg"),
        "[problem]\nn = 1\nN = 8\n[verify]\nsamples = 200\nfault = ginverse\n",
    )
    .unwrap();
    let o = dhym(d.path(), &["verify", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ginverse"));
    assert!(stdout(&o).contains("FAIL ginverse"));
}

#[test]
fn flow_converges_and_report_summarizes() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), FLOW).unwrap();
    let o = dhym(d.path(), &["flow", "--config", "c.cfg", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "status"), "Converged");
    let csv = fs::read_to_string(d.path().join("o/diagnostics.csv")).unwrap();
    assert!(csv.starts_with("t,dt,V,abs_Z,theta_hat"));
    let ck = checkpoint_read(&d.path().join("o/final.ckpt")).unwrap();
    assert_eq!(ck.route, Route::Flow);

    let o = dhym(d.path(), &["report", "--config", "c.cfg", "--out", "o"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.lines().any(|l| l.starts_with("max_gradF2")), "{s}");
    assert!(d.path().join("o/summary.txt").exists());
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), FLOW).unwrap();
    for (k, out) in [("1", "a"), ("3", "b")] {
        let o = dhym(d.path(), &["flow", "--config", "c.cfg", "--threads", k, "--out", out]);
        assert!(o.status.success());
    }
    for f in ["diagnostics.csv", "report.txt", "final.ckpt"] {
        let a = fs::read(d.path().join("a").join(f)).unwrap();
        let b = fs::read(d.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between thread counts");
    }
}

#[test]
fn max_steps_exits_2_and_resume_finishes_identically() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), FLOW).unwrap();
    let full = dhym(d.path(), &["flow", "--config", "c.cfg", "--out", "full"]);
    assert!(full.status.success());

    let short = FLOW.replace("monitor_cadence = 1", "monitor_cadence = 1\nmax_steps = 5");
    fs::write(d.path().join("short.cfg"), short).unwrap();
    let o = dhym(d.path(), &["flow", "--config", "short.cfg", "--out", "part"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(value(&stdout(&o), "steps"), "5");

    // max_steps is not part of the checkpoint hash, so the full config resumes it.
    let o = dhym(
        d.path(),
        &["flow", "--config", "c.cfg", "--resume", "part/final.ckpt", "--out", "rest"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read(d.path().join("full/final.ckpt")).unwrap();
    let b = fs::read(d.path().join("rest/final.ckpt")).unwrap();
    assert!(a == b, "resumed run differs from the uninterrupted one");
}

#[test]
fn resume_with_changed_config_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let short = FLOW.replace("monitor_cadence = 1", "monitor_cadence = 1\nmax_steps = 2");
    fs::write(d.path().join("short.cfg"), short).unwrap();
    assert_eq!(dhym(d.path(), &["flow", "--config", "short.cfg", "--out", "p"]).status.code(), Some(2));
    fs::write(d.path().join("other.cfg"), FLOW.replace("monitor_cadence = 1", "monitor_cadence = 2")).unwrap();
    let o = dhym(d.path(), &["flow", "--config", "other.cfg", "--resume", "p/final.ckpt", "--out", "q"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("config hash"));
    assert!(!d.path().join("q/final.ckpt").exists());
}

#[test]
fn low_blowup_threshold_halts_with_monitor_violation() {
    let d = tempfile::tempdir().unwrap();
    let cfg = FLOW.replace("monitor_cadence = 1", "monitor_cadence = 1\nblowup_factor = 1e-3");
    fs::write(d.path().join("c.cfg"), cfg).unwrap();
    let o = dhym(d.path(), &["flow", "--config", "c.cfg", "--out", "o"]);
    assert_eq!(o.status.code(), Some(4), "{}", stdout(&o));
    assert_eq!(value(&stdout(&o), "status"), "MonitorViolation");
    assert!(checkpoint_read(&d.path().join("o/final.ckpt")).is_ok());
}

#[test]
fn periodic_checkpoints_are_written() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), format!("{FLOW}[output]\ncheckpoint_every = 4\n")).unwrap();
    assert!(dhym(d.path(), &["flow", "--config", "c.cfg", "--out", "o"]).status.success());
    let ck = checkpoint_read(&d.path().join("o/step_00000004.ckpt")).unwrap();
    assert_eq!(ck.step, 4);
}

#[test]
fn ma_route_converges_on_a_surface() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("c.cfg"),
        "[problem]\nn = 2\nN = 8\nB.diag = 2 1\npsi0 = band_limited 11 1 0.05\n",
    )
    .unwrap();
    let o = dhym(d.path(), &["ma", "--config", "c.cfg", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert_eq!(value(&s, "status"), "Converged");
    assert!(value(&s, "sup_residual").parse::<f64>().unwrap() < 1e-8);
    let csv = fs::read_to_string(d.path().join("o/diagnostics.csv")).unwrap();
    assert!(csv.starts_with("route,step,t"));
    assert!(csv.lines().skip(1).all(|l| l.starts_with("ma,")));
    assert_eq!(checkpoint_read(&d.path().join("o/final.ckpt")).unwrap().route, Route::Ma);
}

#[test]
fn ma_degree_zero_uses_the_poisson_route() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("c.cfg"),
        "[problem]\nn = 2\nN = 8\nB.diag = 1 -1\npsi0 = band_limited 5 1 0.05\n",
    )
    .unwrap();
    let o = dhym(d.path(), &["ma", "--config", "c.cfg", "--out", "o"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "route"), "poisson");
}

#[test]
fn flow_rejects_non_hypercritical_start_when_required() {
    let d = tempfile::tempdir().unwrap();
    let cfg = FLOW.replace("B.diag = 3 3", "B.diag = 0.5 0.5");
    fs::write(d.path().join("c.cfg"), cfg).unwrap();
    let o = dhym(d.path(), &["flow", "--config", "c.cfg", "--out", "o"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("not hypercritical"));
    assert!(!d.path().join("o/final.ckpt").exists());
}
