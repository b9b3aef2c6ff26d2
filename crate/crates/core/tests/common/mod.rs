#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use txdeploy_core::engine::{TraceEvent, TraceKind};
use txdeploy_core::model::Criticality;
use txdeploy_core::{parse_scenario, pml, validate, ExecutionState, Scenario, ValidatedProcess, World};

pub fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn read(name: &str) -> String {
    let path = scenario_dir().join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn process_text(src: &str) -> Result<ValidatedProcess, String> {
    let parsed = pml::parse(src).map_err(|d| format!("{d:?}"))?;
    validate(parsed.value).map_err(|v| format!("{v:?}"))
}

pub fn process(name: &str) -> ValidatedProcess {
    process_text(&read(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn world_text(src: &str) -> Result<Scenario, String> {
    parse_scenario(src, Path::new("generated.world"))
        .map(|p| p.value)
        .map_err(|d| format!("{d:?}"))
}

pub fn world(name: &str) -> Scenario {
    world_text(&read(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Process/world pairs shipped with the repository, with the world's
/// single-site or multi-site nature left to the caller.
pub const CORPUS: [(&str, &str); 10] = [
    ("install.dproc", "clean.world"),
    ("install.dproc", "mirror-80.world"),
    ("install.dproc", "mirror-10.world"),
    ("install.dproc", "conflict.world"),
    ("install.dproc", "platform.world"),
    ("install.dproc", "resume.world"),
    ("gateway.dproc", "gateway.world"),
    ("dictionary.dproc", "dictionary.world"),
    ("unsafe.dproc", "unsafe.world"),
    ("thousand.dproc", "thousand.world"),
];

/// The legal status changes, written out independently of the engine.
const LEGAL: [(&str, &str); 10] = [
    ("Pending", "Running"),
    ("Running", "Succeeded"),
    ("Running", "Failed"),
    ("Failed", "Skipped"),
    ("Failed", "ContingencySucceeded"),
    ("Succeeded", "Compensated"),
    ("ContingencySucceeded", "Compensated"),
    ("Compensated", "Pending"),
    ("Failed", "Pending"),
    ("Skipped", "Pending"),
];

/// Replays the `transition` payloads of one run and checks each against
/// [`LEGAL`] and against the status the activity was last left in. Returns
/// the number of transitions seen.
pub fn legal_transitions(st: &ExecutionState) -> Result<usize, String> {
    let mut current: BTreeMap<String, String> = BTreeMap::new();
    let mut n = 0;
    for e in &st.trace {
        let Some(t) = e.get("transition") else { continue };
        let (from, to) = t.split_once('>').ok_or_else(|| format!("clock {}: bad transition {t}", e.clock))?;
        let a = e.activity.as_ref().ok_or_else(|| format!("clock {}: transition without activity", e.clock))?;
        if !LEGAL.contains(&(from, to)) {
            return Err(format!("clock {}: {a} {from} -> {to} is illegal", e.clock));
        }
        let seen = current.get(a.as_str()).map_or("Pending", String::as_str);
        if seen != from {
            return Err(format!("clock {}: {a} leaves {from} but was {seen}", e.clock));
        }
        current.insert(a.to_string(), to.to_owned());
        n += 1;
    }
    for (a, s) in &st.statuses {
        let last = current.get(a.as_str()).map_or("Pending", String::as_str);
        if s.name() != last {
            return Err(format!("{a} ends {} but the trace leaves it {last}", s.name()));
        }
    }
    Ok(n)
}

/// Every decision about a non-critical activity, with whether it was Ignore.
pub fn non_critical_decisions(p: &ValidatedProcess, st: &ExecutionState) -> Vec<(String, bool)> {
    let nc: Vec<&str> = p
        .definition()
        .activities
        .iter()
        .filter(|a| a.criticality == Criticality::NonCritical)
        .map(|a| a.id.as_str())
        .collect();
    st.trace
        .iter()
        .filter(|e| e.kind == TraceKind::DecisionMade)
        .filter_map(|e| {
            let a = e.activity.as_ref()?;
            nc.contains(&a.as_str()).then(|| (a.to_string(), e.get("choice") == Some("Ignore")))
        })
        .collect()
}

/// The savepoint a failed run was rolled back to, read from its decisions:
/// the last compensation target, or process start after an abort.
pub fn reached_savepoint(trace: &[TraceEvent]) -> Option<String> {
    let mut reached = None;
    for e in trace.iter().filter(|e| e.kind == TraceKind::DecisionMade) {
        match e.get("choice") {
            Some("CompensateToSavepoint") => reached = e.get("savepoint").map(str::to_owned),
            Some("Abort") => reached = Some("process-start".to_owned()),
            _ => {}
        }
    }
    reached
}

/// Snapshot id recorded for a savepoint name.
pub fn snapshot_of(st: &ExecutionState, savepoint: &str) -> Option<String> {
    st.snapshots
        .iter()
        .find(|(k, _)| k.to_string() == savepoint)
        .map(|(_, id)| id.clone())
}

// --- random processes and worlds ---

struct Act {
    name: &'static str,
    body: String,
}

/// A random deployment process of at most six activities, as `.dproc`
/// text. Not every draw validates; callers skip the ones that do not.
pub fn random_process(rng: &mut impl Rng, name: &str) -> String {
    let resolve = rng.random_bool(0.5);
    let activate = rng.random_bool(0.4);
    let mut optional = vec!["DeletePartialPackage", "UninstallPackage", "TransfertFromMirror", "SearchMirror"];
    if activate {
        optional.push("DeactivatePackage");
    }
    optional.shuffle(rng);
    let mut budget = 6 - 3 - usize::from(resolve) - usize::from(activate);
    let mut recovery: Vec<&str> = Vec::new();
    for r in optional {
        if budget > 0 && rng.random_bool(0.6) {
            recovery.push(r);
            budget -= 1;
        }
    }
    let has = |r: &str| recovery.contains(&r);
    let scope = |rng: &mut dyn RngCore| {
        if rng.random_bool(0.5) {
            "site-state"
        } else {
            "site-state-and-products"
        }
    };

    let mut acts = Vec::new();
    let mut b = String::new();
    b.push_str("    action search\n");
    if rng.random_bool(0.4) {
        let _ = writeln!(b, "    savepoint {}", scope(rng));
    }
    b.push_str("    attribute app \"Editor\"\n    attribute version \"1.0\"\n");
    b.push_str("    port location out ok PackageLocation\n    port error out ko ExceptionReport\n");
    acts.push(Act { name: "Search", body: b });

    if resolve {
        let mut b = String::from("    action resolve\n");
        if rng.random_bool(0.6) {
            let _ = writeln!(b, "    savepoint {}", scope(rng));
        }
        b.push_str("    port location in ok PackageLocation\n    port plan out ok InstallPlan\n");
        b.push_str("    port error out ko ExceptionReport\n");
        acts.push(Act { name: "Resolve", body: b });
    }

    let mut b = String::from("    action transfer\n    port location in ok PackageLocation\n");
    if resolve {
        b.push_str("    port plan in ok InstallPlan\n");
    }
    b.push_str("    port staged out ok StagedPackage\n    port error out ko ExceptionReport\n");
    if rng.random_bool(0.7) {
        b.push_str("    context-var progress_fraction fraction transfer\n");
    }
    acts.push(Act { name: "Transfert", body: b });

    let mut b = String::from("    action install\n");
    if rng.random_bool(0.1) {
        b.push_str("    criticality non-critical\n");
    }
    if rng.random_bool(0.2) {
        let _ = writeln!(b, "    savepoint {}", scope(rng));
    }
    b.push_str("    port staged in ok StagedPackage\n    port installed out ok InstalledPackage\n");
    b.push_str("    port error out ko ExceptionReport\n");
    acts.push(Act { name: "Install", body: b });

    if activate {
        let mut b = String::from("    action activate\n");
        if rng.random_bool(0.3) {
            b.push_str("    criticality non-critical\n");
        }
        if rng.random_bool(0.5) {
            b.push_str("    attribute restart \"Legacy@2.0:core\"\n");
        }
        b.push_str("    port installed in ok InstalledPackage\n    port activated out ok InstalledPackage\n");
        b.push_str("    port error out ko ExceptionReport\n");
        acts.push(Act { name: "Activate", body: b });
    }

    let comp = |action: &str, of: &str| format!("    action {action}\n    compensation-of {of}\n    port error out ko ExceptionReport\n");
    if has("DeletePartialPackage") {
        acts.push(Act { name: "DeletePartialPackage", body: comp("unstage", "Transfert") });
    }
    if has("UninstallPackage") {
        acts.push(Act { name: "UninstallPackage", body: comp("uninstall", "Install") });
    }
    if has("DeactivatePackage") {
        acts.push(Act { name: "DeactivatePackage", body: comp("deactivate", "Activate") });
    }
    if has("SearchMirror") {
        acts.push(Act {
            name: "SearchMirror",
            body: "    action search\n    contingency-of Search\n    attribute app \"Editor\"\n    attribute server \"B\"\n    attribute version \"1.0\"\n    port error in ko ExceptionReport\n    port location out ok PackageLocation\n    port failure out ko ExceptionReport\n".into(),
        });
    }
    if has("TransfertFromMirror") {
        acts.push(Act {
            name: "TransfertFromMirror",
            body: "    action transfer\n    contingency-of Transfert\n    attribute mirror \"true\"\n    port error in ko ExceptionReport\n    port failure out ko ExceptionReport\n".into(),
        });
    }

    let mut s = format!("process {name} {{\n  entry Search\n");
    s.push_str(STANDARD_TYPES);
    for a in &acts {
        let _ = write!(s, "  activity {} {{\n{}  }}\n", a.name, a.body);
    }
    s.push_str("  flow Search.location -> Transfert.location\n");
    if resolve {
        s.push_str("  flow Search.location -> Resolve.location\n  flow Resolve.plan -> Transfert.plan\n");
    }
    s.push_str("  flow Transfert.staged -> Install.staged\n");
    if activate {
        s.push_str("  flow Install.installed -> Activate.installed\n");
    }
    if has("SearchMirror") {
        s.push_str("  flow Search.error -> SearchMirror.error\n");
    }
    if has("TransfertFromMirror") {
        s.push_str("  flow Transfert.error -> TransfertFromMirror.error\n");
    }
    s.push_str("}\n");
    s
}

const STANDARD_TYPES: &str = "  product-type ExceptionReport {
    activity text
    detail text
    kind text
  }
  product-type InstallPlan {
    packages text
  }
  product-type InstalledPackage {
    packages text
    site text
  }
  product-type PackageLocation {
    app text
    server text
    version text
  }
  product-type StagedPackage {
    packages text
    site text
    units integer
  }
";

fn server(id: &str, help: bool) -> String {
    let mut s = format!("  server {id} {{\n    package Editor 1.0 {{\n      component core mandatory 6\n");
    if help {
        s.push_str("      component help optional 2\n");
    }
    s.push_str("      depends-on Runtime >=1.0\n    }\n    package Runtime 1.2 {\n      component base mandatory 2\n    }\n  }\n");
    s
}

/// A random single-target world over the Editor catalogue with up to three
/// scripted faults, as `.world` text.
pub fn random_world(rng: &mut impl Rng, name: &str) -> String {
    let help = rng.random_bool(0.7);
    let mut s = format!("world {name} {{\n");
    let threshold = [0.3, 0.5, 0.7][rng.random_range(0..3)];
    let _ = write!(
        s,
        "  recovery {{\n    threshold {threshold}\n    max-contingency-attempts {}\n    resume-after-compensation {}\n  }}\n",
        rng.random_range(0..=2),
        rng.random_bool(0.3)
    );
    s.push_str(&server("A", help));
    s.push_str(&server("B", help));
    s.push_str("  site client {\n    target\n    tag desktop\n    installed Legacy 2.0 core active\n");
    if rng.random_bool(0.1) {
        s.push_str("    installed Runtime 0.9 base active\n");
    }
    s.push_str("  }\n");
    let n = rng.random_range(0..=3);
    for _ in 0..n {
        let (trigger, fault) = random_fault(rng);
        let _ = write!(s, "  fault {{\n    trigger {trigger}\n    raise {fault}\n  }}\n");
    }
    s.push_str("}\n");
    s
}

fn random_fault(rng: &mut impl Rng) -> (String, String) {
    let f = rng.random_range(1..=9) as f64 / 10.0;
    let k = rng.random_range(1..=2);
    let err = "action-error \"injected\"".to_owned();
    match rng.random_range(0..9) {
        0 => (format!("after-fraction transfer {f} on A"), "server-down A".into()),
        1 => (format!("during-action transfer occurrence {k}"), "link-down client".into()),
        2 => (format!("during-action install occurrence {k}"), err),
        3 => ("during-action resolve".into(), err),
        4 => (format!("during-action search occurrence {k}"), "server-down A".into()),
        5 => (format!("after-fraction {} {f}", ["unstage", "uninstall", "deactivate"][rng.random_range(0..3)]), err),
        6 => ("during-action activate".into(), err),
        7 => (format!("at-clock {}", rng.random_range(0..30)), "server-down B".into()),
        _ => (format!("after-fraction install {f}"), err),
    }
}

/// The single world of a one-target scenario.
pub fn only_world(sc: &Scenario) -> World {
    assert_eq!(sc.targets.len(), 1, "expected one target");
    sc.world(&sc.targets[0])
}
