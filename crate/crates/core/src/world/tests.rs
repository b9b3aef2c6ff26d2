use super::*;
use crate::consistency::replay_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn word() -> PackageDescriptor {
    PackageDescriptor::new("Word", "1.0")
        .with_component("editor", true, 6)
        .with_component("dictionary", false, 4)
}

fn world() -> World {
    World::new("w", "site")
        .with_server(Server::new("B").hosting(word()))
        .with_server(Server::new("A").hosting(word()))
}

fn site() -> SiteId {
    SiteId::from("site")
}

fn key() -> PackageKey {
    PackageKey::new("Word", "1.0")
}

fn from(server: &str) -> TransferSource {
    TransferSource {
        location: Some((ServerId::from(server), key())),
        ..TransferSource::default()
    }
}

fn kind(o: &ActionOutcome) -> Option<ExceptionKind> {
    o.failure().map(|f| f.kind)
}

fn assert_log_sound(w: &World) {
    for s in w.sites() {
        let r = replay_oracle(&s.effect_log).unwrap();
        assert_eq!(r.installed, s.installed);
        assert_eq!(r.staged, s.staged);
    }
}

#[test]
fn search_prefers_lowest_up_server() {
    let mut w = world();
    let o = w.search_package(&site(), &key(), None, 0);
    assert!(o.is_done());
    assert_eq!(o.product(products::PACKAGE_LOCATION).unwrap().text("server"), Some("A"));
}

#[test]
fn search_reports_down_and_unknown() {
    let mut w = World::new("w", "site").with_server(Server {
        up: false,
        ..Server::new("A").hosting(word())
    });
    let o = w.search_package(&site(), &key(), None, 0);
    assert_eq!(kind(&o), Some(ExceptionKind::ServerDown));
    assert!(o.failure().unwrap().detail.contains("no reachable server"));
    let o = w.search_package(&site(), &PackageKey::new("Nope", "1"), None, 0);
    assert!(o.failure().unwrap().detail.contains("package not found"));
}

#[test]
fn resolve_orders_dependencies_first() {
    let a = PackageDescriptor::new("A", "1")
        .with_component("a", true, 1)
        .depending_on("B", VersionConstraint::Exact("1".into()));
    let b = PackageDescriptor::new("B", "1").with_component("b", true, 1);
    let mut w = World::new("w", "site").with_server(Server::new("S").hosting(a).hosting(b));
    let o = w.resolve_dependencies(&site(), &PackageKey::new("A", "1"), 0);
    assert_eq!(o.product(products::INSTALL_PLAN).unwrap().text("packages"), Some("B@1,A@1"));

    let o = w.resolve_dependencies(&site(), &PackageKey::new("B", "1"), 0);
    assert_eq!(o.product(products::INSTALL_PLAN).unwrap().text("packages"), Some("B@1"));
}

#[test]
fn resolve_conflicts_with_installed_version() {
    let a = PackageDescriptor::new("A", "1")
        .with_component("a", true, 1)
        .depending_on("C", VersionConstraint::AtLeast("2.0".into()));
    let c2 = PackageDescriptor::new("C", "2.0").with_component("c", true, 1);
    let mut w = World::new("w", "site").with_server(Server::new("S").hosting(a).hosting(c2));
    w.preinstall(&site(), ComponentKey::parse("C@1.0:c").unwrap(), true).unwrap();
    let o = w.resolve_dependencies(&site(), &PackageKey::new("A", "1"), 0);
    assert_eq!(kind(&o), Some(ExceptionKind::DependencyConflict));
}

#[test]
fn resolve_detects_cycles() {
    let a = PackageDescriptor::new("A", "1")
        .with_component("a", true, 1)
        .depending_on("B", VersionConstraint::Exact("1".into()));
    let b = PackageDescriptor::new("B", "1")
        .with_component("b", true, 1)
        .depending_on("A", VersionConstraint::Exact("1".into()));
    let mut w = World::new("w", "site").with_server(Server::new("S").hosting(a).hosting(b));
    let o = w.resolve_dependencies(&site(), &PackageKey::new("A", "1"), 0);
    assert_eq!(kind(&o), Some(ExceptionKind::DependencyConflict));
    assert!(o.failure().unwrap().detail.contains("cycle"));
}

/// Random DAGs of up to 8 packages: the plan is exactly the reachable set
/// minus what is installed, and every package follows its dependencies.
#[test]
fn resolve_matches_closure_oracle_on_random_dags() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=8usize);
        let mut edges: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut server = Server::new("S");
        for i in 0..n {
            let mut p = PackageDescriptor::new(&format!("P{i}"), "1").with_component("c", true, 1);
            for j in (i + 1)..n {
                if rng.random_bool(0.3) {
                    p = p.depending_on(&format!("P{j}"), VersionConstraint::Exact("1".into()));
                    edges.entry(i).or_default().push(j);
                }
            }
            server = server.hosting(p);
        }
        let mut w = World::new("w", "site").with_server(server);
        let installed: Vec<usize> = (1..n).filter(|_| rng.random_bool(0.2)).collect();
        for &i in &installed {
            w.preinstall(&site(), ComponentKey::parse(&format!("P{i}@1:c")).unwrap(), false).unwrap();
        }

        // Oracle: walk dependencies, stopping at installed packages.
        let mut reach = BTreeSet::new();
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if i != 0 && installed.contains(&i) {
                continue;
            }
            if reach.insert(i) {
                stack.extend(edges.get(&i).into_iter().flatten().copied());
            }
        }

        let o = w.resolve_dependencies(&site(), &PackageKey::new("P0", "1"), 0);
        let plan = split_packages(o.product(products::INSTALL_PLAN).unwrap().text("packages").unwrap()).unwrap();
        let got: Vec<usize> = plan.iter().map(|k| k.app[1..].parse().unwrap()).collect();
        let got_set: BTreeSet<usize> = got.iter().copied().collect();
        assert_eq!(got_set, reach, "seed {seed}");
        assert_eq!(got.len(), got_set.len(), "seed {seed}");
        for (pos, i) in got.iter().enumerate() {
            for d in edges.get(i).into_iter().flatten() {
                if let Some(dp) = got.iter().position(|x| x == d) {
                    assert!(dp < pos, "seed {seed}: P{d} must precede P{i}");
                }
            }
        }
    }
}

fn after_fraction(f: f64) -> FaultScript {
    FaultScript::new().with(
        Trigger::AfterFraction {
            action: ActionKind::Transfer,
            fraction: f,
            target: None,
        },
        Fault::ServerDown(ServerId::from("A")),
    )
}

fn ten_units() -> World {
    World::new("w", "site").with_server(Server::new("A").hosting(word())).with_server(Server::new("B").hosting(word()))
}

#[test]
fn transfer_without_faults_stages_everything() {
    let mut w = ten_units();
    let o = w.transfer(&site(), &[key()], &from("A"), 0);
    assert!(o.is_done());
    assert_eq!(o.progress(), Some(1.0));
    assert_eq!(w.site(&site()).unwrap().staged.len(), 10);
    assert_eq!(o.product(products::STAGED_PACKAGE).unwrap().values["units"], Value::Integer(10));
}

#[test]
fn transfer_fault_at_fraction_and_rollback() {
    for (f, staged) in [(0.8, 8), (0.1, 1)] {
        let mut w = ten_units().with_faults(after_fraction(f));
        let o = w.transfer(&site(), &[key()], &from("A"), 0);
        assert_eq!(kind(&o), Some(ExceptionKind::NetworkFailure));
        assert_eq!(o.progress(), Some(f));
        assert_eq!(o.effects.len(), staged);
        assert_eq!(w.rollback_action(o.attempt).unwrap(), staged);
        assert!(w.site(&site()).unwrap().staged.is_empty());
        assert!(w.site(&site()).unwrap().effect_log.is_empty());
        assert_log_sound(&w);
    }
}

#[test]
fn transfer_progress_is_staged_over_total_at_each_step() {
    for k in 1..=10 {
        let f = k as f64 / 10.0;
        let mut w = ten_units().with_faults(FaultScript::new().with(
            Trigger::AfterFraction {
                action: ActionKind::Transfer,
                fraction: f,
                target: None,
            },
            Fault::ActionError("stop".into()),
        ));
        let o = w.transfer(&site(), &[key()], &from("A"), 0);
        assert_eq!(o.progress(), Some(k as f64 / 10.0));
        assert_eq!(o.effects.len(), k);
    }
}

#[test]
fn mirror_transfer_avoids_the_located_server() {
    let mut w = ten_units().with_faults(after_fraction(0.8));
    let o = w.transfer(&site(), &[key()], &from("A"), 0);
    w.rollback_action(o.attempt).unwrap();
    let o = w.transfer(
        &site(),
        &[key()],
        &TransferSource {
            mirror: true,
            ..from("A")
        },
        1,
    );
    assert!(o.is_done(), "{:?}", o.status);
    assert_eq!(w.site(&site()).unwrap().staged.len(), 10);
}

#[test]
fn link_down_raises_network_failure() {
    let mut w = ten_units().with_faults(FaultScript::new().with(
        Trigger::DuringAction {
            action: ActionKind::Transfer,
            target: Some("site".into()),
            occurrence: 1,
        },
        Fault::LinkDown(site()),
    ));
    let o = w.transfer(&site(), &[key()], &from("A"), 0);
    assert_eq!(kind(&o), Some(ExceptionKind::NetworkFailure));
    assert!(o.effects.is_empty());
    assert_eq!(w.rollback_action(o.attempt).unwrap(), 0);
}

#[test]
fn install_requires_staging_and_tags() {
    let mut w = ten_units();
    let o = w.install(&site(), &[key()], None, 0);
    assert!(o.failure().unwrap().detail.contains("incomplete staging"));

    w.transfer(&site(), &[key()], &from("A"), 0);
    let o = w.install(&site(), &[key()], None, 1);
    assert!(o.is_done());
    assert_eq!(w.site(&site()).unwrap().installed.len(), 2);

    let mut osgi = word();
    osgi.app_name = "Bundle".into();
    osgi.requires_tags.insert("osgi-r4".into());
    let bundle = osgi.key();
    let mut w = World::new("w", "site").with_server(Server::new("A").hosting(osgi));
    w.transfer(&site(), &[bundle.clone()], &TransferSource::default(), 0);
    let o = w.install(&site(), &[bundle], None, 1);
    assert_eq!(kind(&o), Some(ExceptionKind::PlatformIncompatible));
}

#[test]
fn install_subset_of_components() {
    let mut w = ten_units();
    w.transfer(&site(), &[key()], &from("A"), 0);
    let only: BTreeSet<String> = ["editor".to_string()].into();
    assert!(w.install(&site(), &[key()], Some(&only), 1).is_done());
    let s = w.site(&site()).unwrap();
    assert!(s.is_installed(&key().component("editor")));
    assert!(!s.is_installed(&key().component("dictionary")));
}

#[test]
fn uninstall_after_install_restores_installed_set() {
    let mut w = ten_units();
    w.preinstall(&site(), ComponentKey::parse("Other@3:core").unwrap(), true).unwrap();
    let before = w.site(&site()).unwrap().installed.clone();
    w.transfer(&site(), &[key()], &from("A"), 0);
    let inst = w.install(&site(), &[key()], None, 1);
    let o = w.compensate(ActionKind::Uninstall, inst.attempt, 2);
    assert!(o.is_done());
    assert_eq!(o.effects.len(), 2);
    assert_eq!(w.site(&site()).unwrap().installed, before);
    assert_eq!(replay_oracle(&w.site(&site()).unwrap().effect_log).unwrap().installed, before);

    let o = w.uninstall(&site(), &[key()], None, 3);
    assert!(o.failure().unwrap().detail.contains("not installed"));
}

#[test]
fn activate_with_restart_and_its_compensation() {
    let mut w = ten_units();
    let legacy = ComponentKey::parse("Legacy@1:core").unwrap();
    w.preinstall(&site(), legacy.clone(), true).unwrap();
    w.transfer(&site(), &[key()], &from("A"), 0);
    w.install(&site(), &[key()], None, 1);
    let before = w.site(&site()).unwrap().installed.clone();
    let act = w.activate(&site(), &[key()], std::slice::from_ref(&legacy), 2);
    assert!(act.is_done());
    let kinds: Vec<EffectKind> = act.effects.iter().map(|e| e.kind).collect();
    assert_eq!(kinds.first(), Some(&EffectKind::Deactivated));
    assert_eq!(kinds.last(), Some(&EffectKind::Activated));
    assert!(w.site(&site()).unwrap().is_active(&legacy));
    assert!(w.compensate(ActionKind::Deactivate, act.attempt, 3).is_done());
    assert_eq!(w.site(&site()).unwrap().installed, before);
    assert_log_sound(&w);
}

#[test]
fn rollback_is_a_noop_without_effects() {
    let mut w = ten_units();
    let o = w.search_package(&site(), &key(), None, 0);
    assert_eq!(w.rollback_action(o.attempt).unwrap(), 0);
}

#[test]
fn snapshot_and_restore_check() {
    let mut w = ten_units();
    let id = w.snapshot(&site()).unwrap();
    assert!(w.restore_check(&id).unwrap());

    let t = w.transfer(&site(), &[key()], &from("A"), 0);
    let i = w.install(&site(), &[key()], None, 1);
    assert!(!w.restore_check(&id).unwrap());

    w.compensate(ActionKind::Uninstall, i.attempt, 2);
    w.compensate(ActionKind::Unstage, t.attempt, 3);
    assert!(w.restore_check(&id).unwrap());
    assert!(matches!(w.restore_check("nope"), Err(WorldError::UnknownSnapshot(_))));
}

#[test]
fn rollback_refuses_out_of_order() {
    let mut w = ten_units().with_faults(after_fraction(0.5));
    let first = w.transfer(&site(), &[key()], &from("A"), 0);
    assert!(!first.is_done());
    let o = w.preinstall(&site(), ComponentKey::parse("X@1:c").unwrap(), false);
    assert!(o.is_ok());
    assert_eq!(w.rollback_action(first.attempt), Err(WorldError::RollbackOutOfOrder(first.attempt.0)));
}

#[test]
fn same_script_fires_identically() {
    let run = || {
        let mut w = ten_units().with_faults(after_fraction(0.3));
        let o = w.transfer(&site(), &[key()], &from("A"), 7);
        (o.faults_fired, o.effects)
    };
    assert_eq!(run(), run());
}

#[test]
fn scenario_file_builds_per_target_worlds() {
    let src = r#"world demo {
  recovery {
    threshold 0.6
    resume-after-compensation true
  }
  server A {
    package Word 1.0 {
      component editor mandatory 3
      component dictionary optional 2
      requires-tag office
    }
  }
  site G {
    target
    tag office
    installed Legacy 2.0 core active
  }
  site G2 {
    tag office
  }
  site-range gw 3 {
    target
  }
  fault {
    trigger during-action install on gw-0001
    raise action-error "disk full"
  }
  fault {
    trigger after-fraction transfer 0.5 on A
    raise server-down A
  }
}
"#;
    let sc = parse_scenario(src, std::path::Path::new("demo.world")).unwrap().value;
    assert_eq!(sc.recovery.contingency_threshold, 0.6);
    assert!(sc.recovery.resume_after_compensation);
    assert_eq!(sc.targets, vec![SiteId::from("G"), "gw-0000".into(), "gw-0001".into(), "gw-0002".into()]);
    let g = sc.world(&SiteId::from("G"));
    assert_eq!(g.sites().count(), 2);
    assert_eq!(g.fault_script().entries.len(), 1);
    assert!(g.site(&"G".into()).unwrap().is_active(&ComponentKey::parse("Legacy@2.0:core").unwrap()));
    let gw1 = sc.world(&SiteId::from("gw-0001"));
    assert_eq!(gw1.fault_script().entries.len(), 2);
    assert_eq!(sc.worlds().len(), 4);
}

#[test]
fn scenario_errors_carry_positions() {
    let src = "world w {\n  site s {\n    target\n  }\n  fault {\n    trigger sometimes\n    raise server-down X\n  }\n}\n";
    let errs = parse_scenario(src, std::path::Path::new("w.world")).unwrap_err();
    assert!(errs.iter().any(|e| e.span.line == 6), "{errs:?}");
    assert!(errs.iter().all(|e| e.span.is_within(src)));
    let errs = parse_scenario("world w {\n}\n", std::path::Path::new("w.world")).unwrap_err();
    assert_eq!(errs[0].message, "world declares no target site");
}
