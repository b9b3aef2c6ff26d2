//! Running one process across many sites under a multi-site policy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Engine, ExecutionState, Outcome, RecoveryPolicy, RunHeader, TraceRecord};
use crate::consistency::ConsistencyReport;
use crate::ids::SiteId;
use crate::model::{MultiSiteMode, MultiSitePolicy, ValidatedProcess};
use crate::world::World;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Aggregate {
    Success,
    Failure,
}

/// One site's run and the world it ran in.
#[derive(Clone, Debug)]
pub struct SiteRun {
    pub state: ExecutionState,
    pub world: World,
}

impl SiteRun {
    pub fn report(&self) -> ConsistencyReport {
        self.state.consistency_report(&self.world)
    }

    /// This run's trace lines preceded by a run header and followed by its
    /// report record.
    pub fn trace_section(&self, header: bool) -> String {
        let mut out = String::new();
        if header {
            let run = RunHeader {
                site: self.state.site.to_string(),
                process: self.state.process.clone(),
                seed: self.state.seed,
            };
            out.push_str(&TraceRecord::Run { run }.to_line());
            out.push('\n');
        }
        out.push_str(&self.state.trace_lines());
        let report = serde_json::to_value(self.report()).expect("report serializes");
        out.push_str(&TraceRecord::Report { report }.to_line());
        out.push('\n');
        out
    }
}

#[derive(Clone, Debug)]
pub struct MultiSiteResult {
    /// In the order the worlds were given.
    pub runs: Vec<SiteRun>,
    /// Order the sites were executed in.
    pub execution_order: Vec<SiteId>,
    /// Sites that did not succeed, in world order.
    pub retry: Vec<SiteId>,
    pub success_fraction: f64,
    pub aggregate: Aggregate,
}

impl MultiSiteResult {
    pub fn count(&self, outcome: Outcome) -> usize {
        self.runs.iter().filter(|r| r.state.outcome == outcome).count()
    }

    /// The whole trace file: one section per site in execution order.
    pub fn trace_file(&self) -> String {
        self.execution_order
            .iter()
            .filter_map(|s| self.runs.iter().find(|r| r.state.site == *s))
            .map(|r| r.trace_section(true))
            .collect()
    }
}

/// Runs `process` once per world. Sites run one after another in an order
/// shuffled by `seed`. Under all-or-nothing, any failed site makes every
/// completed site compensate back to process start; under best-effort,
/// completed sites keep their installs and failed ones form the retry list.
pub fn run_multi_site(
    process: &ValidatedProcess,
    mut worlds: Vec<World>,
    policy: &RecoveryPolicy,
    multi: &MultiSitePolicy,
    seed: u64,
) -> MultiSiteResult {
    let n = worlds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut engines: Vec<Option<Engine<'_>>> = (0..n).map(|_| None).collect();
    for &i in &order {
        let mut e = Engine::new(process, policy, &worlds[i], seed);
        e.start(&mut worlds[i]);
        if let Some(o) = e.forward(&mut worlds[i]) {
            e.finish(o);
        }
        engines[i] = Some(e);
    }

    let any_failed = engines.iter().flatten().any(|e| matches!(e.state.outcome, Outcome::FailedSafe | Outcome::FailedUnsafe));
    for &i in &order {
        let e = engines[i].as_mut().expect("every site ran");
        if e.state.outcome != Outcome::Running {
            continue;
        }
        let outcome = if multi.mode == MultiSiteMode::AllOrNothing && any_failed {
            e.undo_completed(&mut worlds[i], "all-or-nothing: another site failed")
        } else {
            e.natural_outcome()
        };
        e.finish(outcome);
    }

    let runs: Vec<SiteRun> = engines
        .into_iter()
        .zip(worlds)
        .map(|(e, world)| SiteRun {
            state: e.expect("every site ran").into_state(),
            world,
        })
        .collect();
    let succeeded = runs.iter().filter(|r| r.state.outcome.is_success()).count();
    let success_fraction = if n == 0 { 1.0 } else { succeeded as f64 / n as f64 };
    let ok = match multi.mode {
        MultiSiteMode::AllOrNothing => succeeded == n,
        MultiSiteMode::BestEffort => success_fraction >= multi.min_success_fraction.unwrap_or(1.0),
    };
    MultiSiteResult {
        retry: runs
            .iter()
            .filter(|r| !r.state.outcome.is_success())
            .map(|r| r.state.site.clone())
            .collect(),
        execution_order: order.iter().map(|&i| runs[i].state.site.clone()).collect(),
        runs,
        success_fraction,
        aggregate: if ok { Aggregate::Success } else { Aggregate::Failure },
    }
}
