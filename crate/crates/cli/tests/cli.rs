use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario(name: &str) -> PathBuf {
    scenarios().join(name)
}

fn txdeploy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_txdeploy"))
        .args(args)
        .env_remove("TXDEPLOY_TRACE_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run(process: &str, world: &Path, trace: &Path, extra: &[&str]) -> Output {
    let p = scenario(process);
    let mut args = vec![
        "run",
        "--process",
        p.to_str().unwrap(),
        "--world",
        world.to_str().unwrap(),
        "--trace-out",
        trace.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    txdeploy(&args)
}

#[test]
fn validate_accepts_shipped_processes() {
    for name in ["install.dproc", "gateway.dproc", "dictionary.dproc", "thousand.dproc", "unsafe.dproc"] {
        let o = txdeploy(&["validate", scenario(name).to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn validate_rejects_ko_flow_into_ok_port() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("install.dproc"))
        .unwrap()
        .replace("  port error in ko ExceptionReport\n    port failure", "  port error in ok ExceptionReport\n    port failure");
    let path = dir.path().join("bad.dproc");
    std::fs::write(&path, text).unwrap();
    let o = txdeploy(&["validate", path.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("KO dataflow must target an In/KO port"), "{err}");
}

#[test]
fn validate_reports_missing_file_and_syntax_errors() {
    assert_eq!(code(&txdeploy(&["validate", "/nonexistent/x.dproc"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.dproc");
    std::fs::write(&path, "process p {\n  entry a\n  activity a {\n").unwrap();
    let o = txdeploy(&["validate", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.dproc:"));
}

#[test]
fn exit_codes_follow_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("install.dproc", "clean.world", 0),
        ("install.dproc", "mirror-80.world", 0),
        ("install.dproc", "mirror-10.world", 4),
        ("install.dproc", "conflict.world", 4),
        ("install.dproc", "platform.world", 4),
        ("install.dproc", "resume.world", 0),
        ("gateway.dproc", "gateway.world", 0),
        ("dictionary.dproc", "dictionary.world", 0),
        ("unsafe.dproc", "unsafe.world", 5),
    ];
    for (p, w, expected) in cases {
        let o = run(p, &scenario(w), &dir.path().join("t.jsonl"), &[]);
        assert_eq!(code(&o), expected, "{p} {w}");
    }
    let o = run(
        "dictionary.dproc",
        &scenario("dictionary.world"),
        &dir.path().join("t.jsonl"),
        &["--no-partial-ok"],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn backup_gateway_trace_shows_contingency() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("gw.jsonl");
    let o = run("gateway.dproc", &scenario("gateway.world"), &trace, &[]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(text.contains(r#""kind":"ContingencyRun""#));
    assert!(text.contains(r#""contingency":"TransferToReserve""#));
}

#[test]
fn unrecoverable_run_reports_preserved_safety() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        "install.dproc",
        &scenario("mirror-10.world"),
        &dir.path().join("t.jsonl"),
        &["--report", "records"],
    );
    assert_eq!(code(&o), 4);
    let rec: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(rec["outcome"], "FailedSafe");
    assert_eq!(rec["safety"], "Preserved");
}

#[test]
fn thousand_sites_best_effort_lists_retries() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("thousand.dproc", &scenario("thousand.world"), &dir.path().join("t.jsonl"), &[]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("1000 sites (best-effort, min 0.9): 963 SucceededFull"), "{out}");
    let retry = out.lines().find(|l| l.starts_with("retry list (37): ")).expect("retry list line");
    assert_eq!(retry.split_whitespace().count(), 3 + 37);

    let o = run(
        "thousand.dproc",
        &scenario("thousand.world"),
        &dir.path().join("t.jsonl"),
        &["--multi", "all"],
    );
    assert_eq!(code(&o), 6);
    assert!(stdout(&o).contains("0 SucceededFull"));
}

#[test]
fn policy_flags_override_the_world() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let o = run("install.dproc", &scenario("mirror-80.world"), &trace, &["--threshold", "0.9"]);
    assert_eq!(code(&o), 4);
    assert!(std::fs::read_to_string(&trace).unwrap().contains("progress 0.80 < 0.90"));
    let o = run("install.dproc", &scenario("mirror-80.world"), &trace, &["--max-attempts", "0"]);
    assert_eq!(code(&o), 4);
    let o = run("install.dproc", &scenario("mirror-80.world"), &trace, &["--threshold", "1.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn identical_runs_write_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    for (p, w) in [("install.dproc", "mirror-80.world"), ("unsafe.dproc", "unsafe.world")] {
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        run(p, &scenario(w), &a, &["--seed", "9"]);
        run(p, &scenario(w), &b, &["--seed", "9"]);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap(), "{p} {w}");
    }
}

#[test]
fn trace_dir_env_is_the_default_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = scenario("install.dproc");
    let w = scenario("clean.world");
    let o = Command::new(env!("CARGO_BIN_EXE_txdeploy"))
        .args(["run", "--process", p.to_str().unwrap(), "--world", w.to_str().unwrap(), "--seed", "3"])
        .env("TXDEPLOY_TRACE_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("install-clean-3.trace.jsonl").exists());
}

#[test]
fn explain_renders_timelines() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("clean.jsonl");
    run("install.dproc", &scenario("clean.world"), &trace, &[]);
    let o = txdeploy(&["explain", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let starts: Vec<&str> = out.lines().filter(|l| l.contains(" started (")).collect();
    assert_eq!(starts.len(), 4);
    for (line, a) in starts.iter().zip(["Search", "Resolve", "Transfert", "Install"]) {
        assert!(line.contains(&format!("  {a} started")), "{line}");
    }

    let trace = dir.path().join("m80.jsonl");
    run("install.dproc", &scenario("mirror-80.world"), &trace, &[]);
    let out = stdout(&txdeploy(&["explain", trace.to_str().unwrap()]));
    assert!(out.contains("Contingency (progress 0.80 ≥ 0.50)"), "{out}");
}

const PAIR_WORLD: &str = "world pair {
  server A {
    package Editor 1.0 {
      component core mandatory 6
      depends-on Runtime >=1.0
    }
    package Runtime 1.2 {
      component base mandatory 2
    }
  }
  site-range gw 2 {
    target
  }
  fault {
    trigger during-action install on gw-0001
    raise action-error \"boom\"
  }
}
";

#[test]
fn explain_shows_compensations_newest_first() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("pair.world");
    std::fs::write(&world, PAIR_WORLD).unwrap();
    let trace = dir.path().join("pair.jsonl");
    let o = run("install.dproc", &world, &trace, &["--multi", "all"]);
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&txdeploy(&["explain", trace.to_str().unwrap()]));
    let section = out.split("== ").find(|s| s.starts_with("install on gw-0000")).expect("gw-0000 section");
    let install = section.find("compensate Install with UninstallPackage ok").expect("install undone");
    let transfer = section.find("compensate Transfert with DeletePartialPackage ok").expect("transfer undone");
    assert!(install < transfer, "{section}");
}

#[test]
fn explain_rejects_malformed_traces() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"clock\": 0,\nnot json\n").unwrap();
    assert_eq!(code(&txdeploy(&["explain", path.to_str().unwrap()])), 2);
    assert_eq!(code(&txdeploy(&["explain", "/nonexistent/trace"])), 2);
}
