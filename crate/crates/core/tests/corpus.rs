mod common;

use txdeploy_core::engine::check_transitions;
use txdeploy_core::{run, Outcome};

use common::*;

#[test]
fn engine_and_independent_checker_agree_on_every_single_site_run() {
    for (pf, wf) in CORPUS.iter().filter(|(p, _)| *p != "thousand.dproc") {
        let p = process(pf);
        let sc = world(wf);
        let mut w = only_world(&sc);
        let st = run(&p, &mut w, &sc.recovery, 0);
        let ours = legal_transitions(&st).unwrap_or_else(|e| panic!("{pf} {wf}: {e}"));
        assert_eq!(check_transitions(&st.trace), Ok(ours), "{pf} {wf}");
        assert!(non_critical_decisions(&p, &st).iter().all(|(_, ignored)| *ignored));
    }
}

#[test]
fn failed_runs_end_at_their_savepoint() {
    for (pf, wf) in [("install.dproc", "mirror-10.world"), ("install.dproc", "platform.world")] {
        let p = process(pf);
        let sc = world(wf);
        let mut w = only_world(&sc);
        let st = run(&p, &mut w, &sc.recovery, 0);
        assert_eq!(st.outcome, Outcome::FailedSafe, "{wf}");
        let sp = reached_savepoint(&st.trace).expect("rolled back");
        let snap = snapshot_of(&st, &sp).expect("snapshot kept");
        assert_eq!(w.restore_check(&snap), Ok(true), "{wf} at {sp}");
    }
}

#[test]
fn random_processes_mostly_validate() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let valid = (0..100)
        .filter(|i| process_text(&random_process(&mut rng, &format!("p{i}"))).is_ok())
        .count();
    assert!(valid >= 20, "{valid} of 100");
    let w = random_world(&mut rng, "w");
    assert!(world_text(&w).is_ok(), "{w}");
}
