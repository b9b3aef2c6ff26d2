//! Executes a validated process against a [`World`], recovering from
//! failures by skipping, running contingencies, or compensating back to a
//! savepoint, and records every step as a trace event.

mod multi;
mod trace;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use multi::{run_multi_site, Aggregate, MultiSiteResult, SiteRun};
pub use trace::{check_transitions, parse_trace, RunHeader, TraceEvent, TraceKind, TraceParseError, TraceRecord};

use crate::consistency::ConsistencyReport;
use crate::ids::{ActivityId, PortId, SiteId};
use crate::model::{
    compensation_plan, span_start, ActionKind, Channel, Direction, ModelError, Product, SavepointRef, SnapshotScope,
    ValidatedProcess, Value, VarKind,
};
use crate::world::{
    products, split_packages, ActionOutcome, ActionRequest, AttemptId, ExceptionKind, PackageKey, SiteState,
    SnapshotId, World,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActivityStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
    Skipped,
    Compensated,
    ContingencySucceeded,
}

impl ActivityStatus {
    pub const ALL: [ActivityStatus; 7] = [
        ActivityStatus::Pending,
        ActivityStatus::Running,
        ActivityStatus::Succeeded,
        ActivityStatus::Failed,
        ActivityStatus::Skipped,
        ActivityStatus::Compensated,
        ActivityStatus::ContingencySucceeded,
    ];

    /// Every transition the engine may perform. The last three are the
    /// resets done when execution resumes after compensation.
    pub const LEGAL: [(ActivityStatus, ActivityStatus); 10] = {
        use ActivityStatus::*;
        [
            (Pending, Running),
            (Running, Succeeded),
            (Running, Failed),
            (Failed, Skipped),
            (Failed, ContingencySucceeded),
            (Succeeded, Compensated),
            (ContingencySucceeded, Compensated),
            (Compensated, Pending),
            (Failed, Pending),
            (Skipped, Pending),
        ]
    };

    pub fn is_legal(from: ActivityStatus, to: ActivityStatus) -> bool {
        Self::LEGAL.contains(&(from, to))
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivityStatus::Pending => "Pending",
            ActivityStatus::Running => "Running",
            ActivityStatus::Succeeded => "Succeeded",
            ActivityStatus::Failed => "Failed",
            ActivityStatus::Skipped => "Skipped",
            ActivityStatus::Compensated => "Compensated",
            ActivityStatus::ContingencySucceeded => "ContingencySucceeded",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn is_success(self) -> bool {
        matches!(self, ActivityStatus::Succeeded | ActivityStatus::ContingencySucceeded)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Running,
    SucceededFull,
    SucceededPartial,
    FailedSafe,
    FailedUnsafe,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        matches!(self, Outcome::SucceededFull | Outcome::SucceededPartial)
    }

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Running => "Running",
            Outcome::SucceededFull => "SucceededFull",
            Outcome::SucceededPartial => "SucceededPartial",
            Outcome::FailedSafe => "FailedSafe",
            Outcome::FailedUnsafe => "FailedUnsafe",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivityContext {
    pub activity: ActivityId,
    pub vars: BTreeMap<String, Value>,
    pub last_error: Option<Box<ExceptionRecord>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExceptionRecord {
    pub activity: ActivityId,
    pub kind: ExceptionKind,
    pub detail: String,
    pub context_snapshot: ActivityContext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionChoice {
    Ignore,
    Contingency,
    CompensateToSavepoint,
    Abort,
}

impl DecisionChoice {
    pub fn name(self) -> &'static str {
        match self {
            DecisionChoice::Ignore => "Ignore",
            DecisionChoice::Contingency => "Contingency",
            DecisionChoice::CompensateToSavepoint => "CompensateToSavepoint",
            DecisionChoice::Abort => "Abort",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryDecision {
    pub choice: DecisionChoice,
    /// Present iff `choice` is CompensateToSavepoint.
    pub savepoint: Option<SavepointRef>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryPolicy {
    pub contingency_threshold: f64,
    pub driving_var: String,
    pub max_contingency_attempts: u32,
    /// Resume forward execution after a successful compensation, at most
    /// once per savepoint. Off: the run stops FailedSafe.
    pub resume_after_compensation: bool,
}

impl Default for RecoveryPolicy {
    fn default() -> Self {
        Self {
            contingency_threshold: 0.5,
            driving_var: "progress_fraction".to_owned(),
            max_contingency_attempts: 1,
            resume_after_compensation: false,
        }
    }
}

impl RecoveryPolicy {
    /// Short label for reasons: `progress_fraction` reads as `progress`.
    fn var_label(&self) -> &str {
        self.driving_var.strip_suffix("_fraction").unwrap_or(&self.driving_var)
    }
}

type ProductMap = BTreeMap<(ActivityId, PortId), Product>;

#[derive(Clone, Debug)]
pub struct ExecutionState {
    pub process: String,
    /// The world's default target.
    pub site: SiteId,
    pub seed: u64,
    pub statuses: BTreeMap<ActivityId, ActivityStatus>,
    pub contexts: BTreeMap<ActivityId, ActivityContext>,
    pub products: ProductMap,
    pub snapshots: BTreeMap<SavepointRef, SnapshotId>,
    pub trace: Vec<TraceEvent>,
    pub outcome: Outcome,
    pub decisions: Vec<(ActivityId, RecoveryDecision)>,
    pub contingency_attempts: BTreeMap<ActivityId, u32>,
    /// Package the run deploys, as first located or planned.
    pub deployed: Option<PackageKey>,
    /// Install plan: the deployed package and the dependencies it needed.
    pub closure: Vec<PackageKey>,
    /// Site that received the install effects.
    pub deployment_site: SiteId,
    /// Snapshot of every site taken before the first activity.
    pub start_snapshot: SnapshotId,
    attempts: BTreeMap<ActivityId, AttemptId>,
    product_snapshots: BTreeMap<SavepointRef, ProductMap>,
    resumed: BTreeSet<SavepointRef>,
}

impl ExecutionState {
    pub fn status(&self, id: &str) -> Option<ActivityStatus> {
        self.statuses.get(id).copied()
    }

    pub fn run_id(&self) -> String {
        format!("{}/{}/{}", self.process, self.site, self.seed)
    }

    /// The trace as file lines, each newline-terminated.
    pub fn trace_lines(&self) -> String {
        self.trace
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace event serializes") + "\n")
            .collect()
    }

    pub fn decision_for(&self, id: &str) -> Option<&RecoveryDecision> {
        self.decisions.iter().find(|(a, _)| a.as_str() == id).map(|(_, d)| d)
    }

    /// Site state of the deployment site before the run.
    pub fn pre_state(&self, world: &World) -> SiteState {
        world
            .snapshot_states(&self.start_snapshot)
            .ok()
            .and_then(|s| s.iter().find(|s| s.id == self.deployment_site).cloned())
            .unwrap_or_else(|| SiteState::new(self.deployment_site.clone()))
    }

    /// Success and safety verdicts for the deployment site.
    pub fn consistency_report(&self, world: &World) -> ConsistencyReport {
        let pre = self.pre_state(world);
        let post = world
            .site(&self.deployment_site)
            .cloned()
            .unwrap_or_else(|| SiteState::new(self.deployment_site.clone()));
        let package = self.deployed.as_ref().and_then(|k| world.package(k));
        ConsistencyReport::build(&self.run_id(), self.outcome, &pre, &post, package, &self.closure)
    }
}

/// Decides how to recover from `exc`, in order: non-critical activities are
/// skipped; a bound contingency runs if attempts remain and the driving
/// variable reached the threshold (or is not tracked); otherwise compensate
/// back to the nearest savepoint, or abort when that chain contains an
/// uncompensatable activity.
pub fn handle_failure(
    state: &ExecutionState,
    process: &ValidatedProcess,
    policy: &RecoveryPolicy,
    exc: &ExceptionRecord,
) -> RecoveryDecision {
    let a = &exc.activity;
    let Some(def) = process.activity(a.as_str()) else {
        return backward_decision(process, a, format!("unknown activity {a}"));
    };
    if !def.is_critical() {
        return RecoveryDecision {
            choice: DecisionChoice::Ignore,
            savepoint: None,
            reason: "non-critical activity".to_owned(),
        };
    }
    let label = policy.var_label();
    let t = policy.contingency_threshold;
    let why = match process.contingency_for(a.as_str()) {
        None => "no contingency".to_owned(),
        Some(c) => {
            let used = state.contingency_attempts.get(a).copied().unwrap_or(0);
            if used >= policy.max_contingency_attempts {
                format!("contingency {} used {used} of {} attempts", c.id, policy.max_contingency_attempts)
            } else if def.context_var(&policy.driving_var).is_none() {
                return RecoveryDecision {
                    choice: DecisionChoice::Contingency,
                    savepoint: None,
                    reason: format!("{label} not tracked; contingency {} available", c.id),
                };
            } else {
                let v = exc
                    .context_snapshot
                    .vars
                    .get(&policy.driving_var)
                    .and_then(Value::as_fraction)
                    .unwrap_or(0.0);
                if v >= t {
                    return RecoveryDecision {
                        choice: DecisionChoice::Contingency,
                        savepoint: None,
                        reason: format!("{label} {v:.2} ≥ {t:.2}"),
                    };
                }
                format!("{label} {v:.2} < {t:.2}")
            }
        }
    };
    backward_decision(process, a, why)
}

fn backward_decision(process: &ValidatedProcess, a: &ActivityId, why: String) -> RecoveryDecision {
    let sp = process.nearest_savepoint(a);
    match process.compensation_chain(a, &sp) {
        Err(ModelError::UncompensatableChain(x)) => RecoveryDecision {
            choice: DecisionChoice::Abort,
            savepoint: None,
            reason: format!("{why}; {x} cannot be compensated, abort to process-start"),
        },
        _ => RecoveryDecision {
            choice: DecisionChoice::CompensateToSavepoint,
            reason: format!("{why}; compensate to {sp}"),
            savepoint: Some(sp),
        },
    }
}

enum Flow {
    Continue,
    ResumeAt(usize),
    Stop(Outcome),
}

fn payload<const N: usize>(items: [(&str, String); N]) -> BTreeMap<String, String> {
    items.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

/// Executes one process on one world. Most callers want [`run`]; the
/// multi-site runner drives the phases separately.
pub struct Engine<'p> {
    process: &'p ValidatedProcess,
    policy: &'p RecoveryPolicy,
    pub state: ExecutionState,
}

impl<'p> Engine<'p> {
    pub fn new(process: &'p ValidatedProcess, policy: &'p RecoveryPolicy, world: &World, seed: u64) -> Self {
        let mut statuses = BTreeMap::new();
        let mut contexts = BTreeMap::new();
        for id in process.execution_order() {
            statuses.insert(id.clone(), ActivityStatus::Pending);
            contexts.insert(id.clone(), Self::fresh_context(process, id));
        }
        Self {
            process,
            policy,
            state: ExecutionState {
                process: process.name.clone(),
                site: world.target().clone(),
                seed,
                statuses,
                contexts,
                products: BTreeMap::new(),
                snapshots: BTreeMap::new(),
                trace: Vec::new(),
                outcome: Outcome::Running,
                decisions: Vec::new(),
                contingency_attempts: BTreeMap::new(),
                deployed: None,
                closure: Vec::new(),
                deployment_site: world.target().clone(),
                start_snapshot: String::new(),
                attempts: BTreeMap::new(),
                product_snapshots: BTreeMap::new(),
                resumed: BTreeSet::new(),
            },
        }
    }

    fn fresh_context(process: &ValidatedProcess, id: &ActivityId) -> ActivityContext {
        let vars = process
            .activity(id.as_str())
            .map(|d| d.context_vars.iter().map(|v| (v.name.clone(), v.kind.initial())).collect())
            .unwrap_or_default();
        ActivityContext {
            activity: id.clone(),
            vars,
            last_error: None,
        }
    }

    fn clock(&self) -> u64 {
        self.state.trace.len() as u64
    }

    fn emit(&mut self, kind: TraceKind, activity: Option<&ActivityId>, payload: BTreeMap<String, String>) {
        let clock = self.clock();
        self.state.trace.push(TraceEvent {
            clock,
            kind,
            activity: activity.cloned(),
            payload,
        });
    }

    fn set_status(&mut self, a: &ActivityId, to: ActivityStatus, kind: TraceKind, mut extra: BTreeMap<String, String>) {
        let from = self.state.statuses.get(a).copied().unwrap_or(ActivityStatus::Pending);
        debug_assert!(ActivityStatus::is_legal(from, to), "illegal {from:?}>{to:?} on {a}");
        self.state.statuses.insert(a.clone(), to);
        extra.insert("transition".to_owned(), format!("{}>{}", from.name(), to.name()));
        self.emit(kind, Some(a), extra);
    }

    /// Emits the process `Started` event and the process-start savepoint.
    pub fn start(&mut self, world: &mut World) {
        let site = self.state.site.to_string();
        let seed = self.state.seed.to_string();
        let process = self.state.process.clone();
        self.emit(TraceKind::Started, None, payload([("process", process), ("site", site), ("seed", seed)]));
        let id = world.snapshot_all();
        self.state.start_snapshot = id.clone();
        let sp = SavepointRef::process_start();
        self.state.snapshots.insert(sp.clone(), id.clone());
        self.state.product_snapshots.insert(sp.clone(), BTreeMap::new());
        self.emit(
            TraceKind::SavepointTaken,
            None,
            payload([("savepoint", sp.to_string()), ("snapshot", id)]),
        );
    }

    /// Runs activities in order until the end or until recovery stops the
    /// run. Returns the stopping outcome, or `None` when every activity was
    /// handled and the run can finish normally.
    pub fn forward(&mut self, world: &mut World) -> Option<Outcome> {
        let order = self.process.execution_order().to_vec();
        let mut pos = 0;
        while pos < order.len() {
            let a = &order[pos];
            if self.state.statuses[a] != ActivityStatus::Pending {
                pos += 1;
                continue;
            }
            match self.execute(a, world) {
                Ok(()) => pos += 1,
                Err(exc) => match self.recover(world, pos, exc) {
                    Flow::Continue => pos += 1,
                    Flow::ResumeAt(p) => pos = p,
                    Flow::Stop(o) => return Some(o),
                },
            }
        }
        None
    }

    /// Outcome of a run whose activities all completed or were skipped.
    pub fn natural_outcome(&self) -> Outcome {
        let mut partial = false;
        for id in self.process.execution_order() {
            let st = self.state.statuses[id];
            let critical = self.process.activity(id.as_str()).is_some_and(|d| d.is_critical());
            if critical && !st.is_success() {
                return Outcome::FailedSafe;
            }
            if !critical && st == ActivityStatus::Skipped {
                partial = true;
            }
        }
        if partial {
            Outcome::SucceededPartial
        } else {
            Outcome::SucceededFull
        }
    }

    /// Sets the terminal outcome and emits the process `Finished` event.
    /// Does nothing once an outcome is set.
    pub fn finish(&mut self, outcome: Outcome) {
        if self.state.outcome != Outcome::Running || outcome == Outcome::Running {
            return;
        }
        self.state.outcome = outcome;
        self.emit(TraceKind::Finished, None, payload([("outcome", outcome.name().to_owned())]));
    }

    pub fn into_state(self) -> ExecutionState {
        self.state
    }

    fn inputs_for(&self, a: &ActivityId) -> Vec<Product> {
        self.process
            .dataflows
            .iter()
            .filter(|f| f.to.activity == *a)
            .filter_map(|f| self.state.products.get(&(f.from.activity.clone(), f.from.port.clone())))
            .cloned()
            .collect()
    }

    fn trace_effects(&mut self, actor: &ActivityId, outcome: &ActionOutcome) {
        for e in &outcome.effects {
            self.emit(
                TraceKind::SiteEffect,
                Some(actor),
                payload([
                    ("site", outcome.site.to_string()),
                    ("seq", e.seq.to_string()),
                    ("effect", e.kind.name().to_owned()),
                    ("subject", e.subject.to_string()),
                ]),
            );
        }
    }

    fn update_context(&mut self, a: &ActivityId, action: ActionKind, outcome: &ActionOutcome) {
        let Some(def) = self.process.activity(a.as_str()) else { return };
        let Some(ctx) = self.state.contexts.get_mut(a) else { return };
        for var in &def.context_vars {
            if var.updated_by.kind() != Some(action) {
                continue;
            }
            let value = outcome.context_updates.get(&var.name).cloned().or_else(|| {
                (var.kind == VarKind::Fraction).then(|| outcome.progress().map(Value::Fraction)).flatten()
            });
            if let Some(v) = value.filter(|v| var.kind.accepts(v)) {
                ctx.vars.insert(var.name.clone(), v);
            }
        }
    }

    /// Routes action outputs onto `owner`'s OK out ports by product type and
    /// notes what is being deployed where.
    fn absorb_products(&mut self, owner: &ActivityId, action: ActionKind, outcome: &ActionOutcome) {
        let ports: Vec<(PortId, String)> = self
            .process
            .activity(owner.as_str())
            .map(|d| {
                d.ports
                    .iter()
                    .filter(|p| p.direction == Direction::Out && p.channel == Channel::Ok)
                    .map(|p| (p.id.clone(), p.product_type.clone()))
                    .collect()
            })
            .unwrap_or_default();
        for p in &outcome.products_out {
            for (port, ty) in &ports {
                if *ty == p.type_name {
                    self.state.products.insert((owner.clone(), port.clone()), p.clone());
                }
            }
            let listed = p.text("packages").and_then(split_packages).unwrap_or_default();
            if p.type_name == products::PACKAGE_LOCATION && self.state.deployed.is_none() {
                if let (Some(app), Some(v)) = (p.text("app"), p.text("version")) {
                    self.state.deployed = Some(PackageKey::new(app, v));
                }
            }
            if p.type_name == products::INSTALL_PLAN && self.state.closure.is_empty() {
                self.state.closure = listed.clone();
            }
            if self.state.deployed.is_none() {
                self.state.deployed = listed.last().cloned();
            }
        }
        if action == ActionKind::Install && !outcome.effects.is_empty() {
            self.state.deployment_site = outcome.site.clone();
        }
    }

    fn take_savepoint(&mut self, a: &ActivityId, scope: SnapshotScope, world: &mut World) {
        let id = world.snapshot_all();
        let sp = SavepointRef::at_activity(a.clone(), scope);
        self.state.snapshots.insert(sp.clone(), id.clone());
        if scope == SnapshotScope::SiteStateAndProducts {
            self.state.product_snapshots.insert(sp.clone(), self.state.products.clone());
        }
        self.emit(
            TraceKind::SavepointTaken,
            Some(a),
            payload([
                ("savepoint", sp.to_string()),
                ("scope", scope.keyword().to_owned()),
                ("snapshot", id),
            ]),
        );
    }

    fn execute(&mut self, a: &ActivityId, world: &mut World) -> Result<(), ExceptionRecord> {
        let process = self.process;
        let def = process.activity(a.as_str()).expect("ordered activities exist");
        let action = def.action_kind().expect("simple activities name an action");
        self.set_status(a, ActivityStatus::Running, TraceKind::Started, payload([("action", action.name().to_owned())]));
        let inputs = self.inputs_for(a);
        let outcome = world.perform(&ActionRequest {
            action,
            attributes: &def.attributes,
            inputs: &inputs,
            compensating: None,
            clock: self.clock(),
        });
        self.trace_effects(a, &outcome);
        self.update_context(a, action, &outcome);
        match outcome.failure() {
            None => {
                self.absorb_products(a, action, &outcome);
                self.state.attempts.insert(a.clone(), outcome.attempt);
                let mut extra = BTreeMap::new();
                if !outcome.faults_fired.is_empty() {
                    extra.insert("faults".to_owned(), outcome.faults_fired.join("; "));
                }
                self.set_status(a, ActivityStatus::Succeeded, TraceKind::Finished, extra);
                if let Some(scope) = def.savepoint {
                    self.take_savepoint(a, scope, world);
                }
                Ok(())
            }
            Some(f) => {
                let (kind, detail) = (f.kind, f.detail.clone());
                Err(self.fail(a, kind, detail, &outcome, world))
            }
        }
    }

    fn fail(
        &mut self,
        a: &ActivityId,
        kind: ExceptionKind,
        detail: String,
        outcome: &ActionOutcome,
        world: &mut World,
    ) -> ExceptionRecord {
        let mut extra = payload([("kind", kind.name().to_owned()), ("detail", detail.clone())]);
        if let Some(p) = outcome.progress() {
            extra.insert("progress".to_owned(), format!("{p:.2}"));
        }
        if !outcome.faults_fired.is_empty() {
            extra.insert("faults".to_owned(), outcome.faults_fired.join("; "));
        }
        self.set_status(a, ActivityStatus::Failed, TraceKind::ExceptionRaised, extra);
        let context_snapshot = self.state.contexts.get(a).cloned().unwrap_or_else(|| Self::fresh_context(self.process, a));
        let record = ExceptionRecord {
            activity: a.clone(),
            kind,
            detail: detail.clone(),
            context_snapshot,
        };
        if let Some(ctx) = self.state.contexts.get_mut(a) {
            ctx.last_error = Some(Box::new(record.clone()));
        }
        if let Some(ko) = self.process.activity(a.as_str()).and_then(|d| d.ko_port()) {
            let report = Product::new(products::EXCEPTION_REPORT)
                .with("activity", Value::Text(a.to_string()))
                .with("kind", Value::Text(kind.name().to_owned()))
                .with("detail", Value::Text(detail));
            let port = ko.id.clone();
            self.state.products.insert((a.clone(), port.clone()), report);
            self.emit(TraceKind::RoutedToKO, Some(a), payload([("port", port.to_string())]));
        }
        self.rollback(a, outcome, world);
        record
    }

    /// Undoes a failed attempt's partial effects.
    fn rollback(&mut self, actor: &ActivityId, outcome: &ActionOutcome, world: &mut World) {
        let n = world
            .rollback_action(outcome.attempt)
            .expect("a failed attempt is the latest on its site");
        if n > 0 {
            self.emit(
                TraceKind::SiteEffect,
                Some(actor),
                payload([("site", outcome.site.to_string()), ("rollback", n.to_string())]),
            );
        }
    }

    fn decide(&mut self, a: &ActivityId, d: &RecoveryDecision) {
        let mut extra = payload([("choice", d.choice.name().to_owned()), ("reason", d.reason.clone())]);
        if let Some(sp) = &d.savepoint {
            extra.insert("savepoint".to_owned(), sp.to_string());
        }
        if d.choice == DecisionChoice::Ignore {
            self.set_status(a, ActivityStatus::Skipped, TraceKind::DecisionMade, extra);
        } else {
            self.emit(TraceKind::DecisionMade, Some(a), extra);
        }
        self.state.decisions.push((a.clone(), d.clone()));
    }

    fn recover(&mut self, world: &mut World, pos: usize, exc: ExceptionRecord) -> Flow {
        let a = exc.activity.clone();
        let d = handle_failure(&self.state, self.process, self.policy, &exc);
        self.decide(&a, &d);
        match d.choice {
            DecisionChoice::Ignore => Flow::Continue,
            DecisionChoice::Contingency => match self.apply_contingency(world, &a) {
                Ok(_) => Flow::Continue,
                Err(e) => {
                    let why = format!("contingency failed: {}", e.detail);
                    let d2 = backward_decision(self.process, &a, why);
                    self.decide(&a, &d2);
                    self.backward(world, pos, &d2)
                }
            },
            DecisionChoice::CompensateToSavepoint | DecisionChoice::Abort => self.backward(world, pos, &d),
        }
    }

    fn backward(&mut self, world: &mut World, pos: usize, d: &RecoveryDecision) -> Flow {
        let sp = match (&d.choice, &d.savepoint) {
            (DecisionChoice::CompensateToSavepoint, Some(sp)) => sp.clone(),
            _ => SavepointRef::process_start(),
        };
        match self.compensate_to(world, &sp, pos) {
            Err(_) => Flow::Stop(Outcome::FailedUnsafe),
            Ok(eff) => {
                let may_resume = d.choice == DecisionChoice::CompensateToSavepoint
                    && self.policy.resume_after_compensation
                    && self.state.resumed.insert(eff.clone());
                if may_resume {
                    Flow::ResumeAt(self.resume(&eff))
                } else {
                    Flow::Stop(Outcome::FailedSafe)
                }
            }
        }
    }

    /// Resets every activity after `sp` that did not keep a result, and
    /// returns the position to continue from.
    fn resume(&mut self, sp: &SavepointRef) -> usize {
        let order = self.process.execution_order();
        let start = span_start(order, sp).unwrap_or(0);
        for id in &order[start..] {
            let st = self.state.statuses[id];
            if matches!(st, ActivityStatus::Compensated | ActivityStatus::Failed | ActivityStatus::Skipped) {
                self.state.contexts.insert(id.clone(), Self::fresh_context(self.process, id));
                self.set_status(
                    id,
                    ActivityStatus::Pending,
                    TraceKind::DecisionMade,
                    payload([
                        ("choice", "Resume".to_owned()),
                        ("reason", format!("resume after compensation to {sp}")),
                        ("savepoint", sp.to_string()),
                    ]),
                );
            }
        }
        start
    }

    /// Runs the contingency bound to `failed` with the failed activity's
    /// inputs. On success the failed activity becomes ContingencySucceeded
    /// and takes over the contingency's outputs.
    pub fn apply_contingency(&mut self, world: &mut World, failed: &ActivityId) -> Result<ActivityStatus, ExceptionRecord> {
        let process = self.process;
        let c = process
            .contingency_for(failed.as_str())
            .expect("contingency decision implies a binding");
        *self.state.contingency_attempts.entry(failed.clone()).or_default() += 1;
        let action = c.action_kind().expect("recovery activities name an action");
        let mut inputs = self.inputs_for(failed);
        inputs.extend(self.inputs_for(&c.id));
        let outcome = world.perform(&ActionRequest {
            action,
            attributes: &c.attributes,
            inputs: &inputs,
            compensating: None,
            clock: self.clock(),
        });
        self.trace_effects(&c.id, &outcome);
        match outcome.failure() {
            None => {
                self.absorb_products(failed, action, &outcome);
                self.state.attempts.insert(failed.clone(), outcome.attempt);
                self.set_status(
                    failed,
                    ActivityStatus::ContingencySucceeded,
                    TraceKind::ContingencyRun,
                    payload([("contingency", c.id.to_string()), ("result", "ok".to_owned())]),
                );
                if let Some(scope) = process.activity(failed.as_str()).and_then(|d| d.savepoint) {
                    self.take_savepoint(failed, scope, world);
                }
                Ok(ActivityStatus::ContingencySucceeded)
            }
            Some(f) => {
                let (kind, detail) = (f.kind, f.detail.clone());
                self.emit(
                    TraceKind::ContingencyRun,
                    Some(failed),
                    payload([
                        ("contingency", c.id.to_string()),
                        ("result", "failed".to_owned()),
                        ("kind", kind.name().to_owned()),
                        ("detail", detail.clone()),
                    ]),
                );
                self.rollback(&c.id, &outcome, world);
                let context_snapshot = self.state.contexts.get(failed).cloned().unwrap_or_else(|| Self::fresh_context(process, failed));
                Err(ExceptionRecord {
                    activity: failed.clone(),
                    kind,
                    detail,
                    context_snapshot,
                })
            }
        }
    }

    /// Compensates, newest first, every activity between `sp` and position
    /// `end` that still holds validated effects, then checks the sites are
    /// back to the savepoint snapshot. A savepoint whose activity never
    /// completed falls back to the nearest earlier one. Returns the
    /// savepoint actually used.
    pub fn compensate_to(&mut self, world: &mut World, sp: &SavepointRef, end: usize) -> Result<SavepointRef, String> {
        let process = self.process;
        let order = process.execution_order();
        let mut eff = sp.clone();
        while !self.state.snapshots.contains_key(&eff) {
            eff = match eff.activity() {
                Some(a) => process.nearest_savepoint(a),
                None => break,
            };
        }
        if eff != *sp {
            self.emit(
                TraceKind::DecisionMade,
                None,
                payload([
                    ("choice", DecisionChoice::CompensateToSavepoint.name().to_owned()),
                    ("reason", format!("no snapshot at {sp}; falling back to {eff}")),
                    ("savepoint", eff.to_string()),
                ]),
            );
        }
        let start = span_start(order, &eff).unwrap_or(0);
        for step in compensation_plan(process, order, start, end.min(order.len())) {
            if !self.state.statuses[&step.target].is_success() {
                continue;
            }
            let (Some(cid), Some(attempt)) = (step.compensation, self.state.attempts.get(&step.target).copied()) else {
                continue;
            };
            let comp = process.activity(cid.as_str()).expect("bound compensation exists");
            let action = comp.action_kind().expect("recovery activities name an action");
            let outcome = world.perform(&ActionRequest {
                action,
                attributes: &comp.attributes,
                inputs: &[],
                compensating: Some(attempt),
                clock: self.clock(),
            });
            self.trace_effects(&cid, &outcome);
            if let Some(f) = outcome.failure() {
                let detail = f.detail.clone();
                self.emit(
                    TraceKind::CompensationRun,
                    Some(&step.target),
                    payload([
                        ("compensation", cid.to_string()),
                        ("result", "failed".to_owned()),
                        ("kind", f.kind.name().to_owned()),
                        ("detail", detail.clone()),
                    ]),
                );
                return Err(format!("compensation {cid} of {} failed: {detail}", step.target));
            }
            self.set_status(
                &step.target,
                ActivityStatus::Compensated,
                TraceKind::CompensationRun,
                payload([("compensation", cid.to_string()), ("result", "ok".to_owned())]),
            );
            self.state.attempts.remove(&step.target);
            self.state.products.retain(|(a, _), _| *a != step.target);
        }
        // Snapshots taken after the savepoint describe undone work.
        self.state.snapshots.retain(|k, _| match k.activity() {
            None => true,
            Some(a) => order.iter().position(|x| x == a).is_some_and(|p| p < start),
        });
        if eff.scope == SnapshotScope::SiteStateAndProducts {
            if let Some(p) = self.state.product_snapshots.get(&eff) {
                self.state.products = p.clone();
            }
        }
        let snap = &self.state.snapshots[&eff];
        if world.restore_check(snap).unwrap_or(false) {
            Ok(eff)
        } else {
            Err(format!("sites differ from the snapshot at {eff}"))
        }
    }

    /// Compensates a run that completed forward back to process start; used
    /// when another site of an all-or-nothing deployment failed.
    pub fn undo_completed(&mut self, world: &mut World, reason: &str) -> Outcome {
        let sp = SavepointRef::process_start();
        self.emit(
            TraceKind::DecisionMade,
            None,
            payload([
                ("choice", DecisionChoice::CompensateToSavepoint.name().to_owned()),
                ("reason", reason.to_owned()),
                ("savepoint", sp.to_string()),
            ]),
        );
        let end = self.process.execution_order().len();
        match self.compensate_to(world, &sp, end) {
            Ok(_) => Outcome::FailedSafe,
            Err(_) => Outcome::FailedUnsafe,
        }
    }
}

/// Runs `process` on `world` to a terminal outcome. The run is fully
/// determined by its inputs; `seed` is recorded in the trace.
pub fn run(process: &ValidatedProcess, world: &mut World, policy: &RecoveryPolicy, seed: u64) -> ExecutionState {
    let mut e = Engine::new(process, policy, world, seed);
    e.start(world);
    let outcome = e.forward(world).unwrap_or_else(|| e.natural_outcome());
    e.finish(outcome);
    e.into_state()
}
