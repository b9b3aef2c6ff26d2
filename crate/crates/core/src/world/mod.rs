//! Deterministic simulated deployment environment: package servers, target
//! sites, links, and the deployment actions that act on them.
//!
//! Every state change on a site is an [`Effect`] appended to its log. Actions
//! run in unit steps; the fault script is consulted before the first step and
//! after every step, so progress-based faults land at exact fractions.

mod fault;
mod package;
mod scenario;
mod site;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use fault::{Fault, FaultEntry, FaultScript, Trigger};
pub use package::{compare_versions, ComponentSpec, Dependency, PackageDescriptor, Server, VersionConstraint};
pub use scenario::{parse_scenario, Scenario};
pub use site::{join_packages, split_packages, ComponentKey, Effect, EffectKind, PackageKey, SiteState};

use fault::{FaultState, StepCtx};
use crate::ids::{ServerId, SiteId};
use crate::model::{ActionKind, Product, ProductTypeDef, ScalarKind, Value};

/// Product type names the world actions read and write.
pub mod products {
    pub const PACKAGE_LOCATION: &str = "PackageLocation";
    pub const INSTALL_PLAN: &str = "InstallPlan";
    pub const STAGED_PACKAGE: &str = "StagedPackage";
    pub const INSTALLED_PACKAGE: &str = "InstalledPackage";
    pub const EXCEPTION_REPORT: &str = "ExceptionReport";
}

/// Declarations matching what the actions produce, for process files that
/// want to reuse them.
pub fn standard_product_types() -> Vec<ProductTypeDef> {
    use ScalarKind::*;
    let ty = |name: &str, fields: &[(&str, ScalarKind)]| ProductTypeDef {
        name: name.to_owned(),
        fields: fields.iter().map(|(f, k)| (f.to_string(), *k)).collect(),
    };
    vec![
        ty(products::EXCEPTION_REPORT, &[("activity", Text), ("detail", Text), ("kind", Text)]),
        ty(products::INSTALL_PLAN, &[("packages", Text)]),
        ty(products::INSTALLED_PACKAGE, &[("packages", Text), ("site", Text)]),
        ty(products::PACKAGE_LOCATION, &[("app", Text), ("server", Text), ("version", Text)]),
        ty(products::STAGED_PACKAGE, &[("packages", Text), ("site", Text), ("units", Integer)]),
    ]
}

/// Context variable every stepped action reports.
pub const PROGRESS_VAR: &str = "progress_fraction";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum ExceptionKind {
    NetworkFailure,
    ServerDown,
    DependencyConflict,
    PlatformIncompatible,
    ActionError,
}

impl ExceptionKind {
    pub fn name(self) -> &'static str {
        match self {
            ExceptionKind::NetworkFailure => "NetworkFailure",
            ExceptionKind::ServerDown => "ServerDown",
            ExceptionKind::DependencyConflict => "DependencyConflict",
            ExceptionKind::PlatformIncompatible => "PlatformIncompatible",
            ExceptionKind::ActionError => "ActionError",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionFailure {
    pub kind: ExceptionKind,
    pub detail: String,
}

impl ActionFailure {
    fn new(kind: ExceptionKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }

    fn action(detail: impl Into<String>) -> Self {
        Self::new(ExceptionKind::ActionError, detail)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActionStatus {
    Done,
    Raised(ActionFailure),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct AttemptId(pub usize);

/// Result of one action attempt. On failure `context_updates` still carries
/// the progress reached.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionOutcome {
    pub attempt: AttemptId,
    pub status: ActionStatus,
    pub context_updates: BTreeMap<String, Value>,
    pub products_out: Vec<Product>,
    pub site: SiteId,
    /// Effects this attempt appended.
    pub effects: Vec<Effect>,
    pub faults_fired: Vec<String>,
}

impl ActionOutcome {
    pub fn is_done(&self) -> bool {
        self.status == ActionStatus::Done
    }

    pub fn failure(&self) -> Option<&ActionFailure> {
        match &self.status {
            ActionStatus::Done => None,
            ActionStatus::Raised(f) => Some(f),
        }
    }

    pub fn progress(&self) -> Option<f64> {
        self.context_updates.get(PROGRESS_VAR).and_then(Value::as_fraction)
    }

    pub fn product(&self, type_name: &str) -> Option<&Product> {
        self.products_out.iter().find(|p| p.type_name == type_name)
    }
}

/// What an activity asks the world to do.
#[derive(Clone, Debug)]
pub struct ActionRequest<'a> {
    pub action: ActionKind,
    pub attributes: &'a BTreeMap<String, String>,
    pub inputs: &'a [Product],
    /// Set when the action runs as a compensation: it undoes the effects of
    /// that earlier attempt instead of reading its arguments.
    pub compensating: Option<AttemptId>,
    pub clock: u64,
}

#[derive(Clone, Debug)]
struct AttemptRecord {
    action: ActionKind,
    site: SiteId,
    effects: Vec<Effect>,
    faults_fired: Vec<String>,
    rolled_back: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorldError {
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(String),
    #[error("unknown attempt {0}")]
    UnknownAttempt(usize),
    #[error("unknown site {0}")]
    UnknownSite(SiteId),
    #[error("attempt {0} is not the latest on its site; cannot roll back")]
    RollbackOutOfOrder(usize),
}

/// Content hash of one or more serialized site states.
pub type SnapshotId = String;

#[derive(Clone, Debug)]
pub struct World {
    pub name: String,
    servers: BTreeMap<ServerId, Server>,
    sites: BTreeMap<SiteId, SiteState>,
    target: SiteId,
    script: FaultScript,
    fault_state: FaultState,
    links_down: BTreeSet<SiteId>,
    snapshots: BTreeMap<SnapshotId, Vec<SiteState>>,
    attempts: Vec<AttemptRecord>,
    history: Option<Vec<SiteState>>,
}

impl World {
    /// An empty world whose default target is `target` (created if absent).
    pub fn new(name: &str, target: impl Into<SiteId>) -> Self {
        let target = target.into();
        let mut sites = BTreeMap::new();
        sites.insert(target.clone(), SiteState::new(target.clone()));
        Self {
            name: name.to_owned(),
            servers: BTreeMap::new(),
            sites,
            target,
            script: FaultScript::default(),
            fault_state: FaultState::default(),
            links_down: BTreeSet::new(),
            snapshots: BTreeMap::new(),
            attempts: Vec::new(),
            history: None,
        }
    }

    pub fn with_server(mut self, server: Server) -> Self {
        self.servers.insert(server.id.clone(), server);
        self
    }

    pub fn with_site(mut self, site: SiteState) -> Self {
        self.sites.insert(site.id.clone(), site);
        self
    }

    pub fn with_faults(mut self, script: FaultScript) -> Self {
        self.fault_state = FaultState::new(&script);
        self.script = script;
        self
    }

    /// Seeds a pre-existing component through the effect log.
    pub fn preinstall(&mut self, site: &SiteId, component: ComponentKey, active: bool) -> Result<(), String> {
        let s = self
            .sites
            .get_mut(site)
            .ok_or_else(|| format!("unknown site {site}"))?;
        s.apply(EffectKind::ComponentInstalled, component.clone())?;
        if active {
            s.apply(EffectKind::Activated, component)?;
        }
        Ok(())
    }

    pub fn target(&self) -> &SiteId {
        &self.target
    }

    pub fn site(&self, id: &SiteId) -> Option<&SiteState> {
        self.sites.get(id)
    }

    pub fn site_mut(&mut self, id: &SiteId) -> Option<&mut SiteState> {
        self.sites.get_mut(id)
    }

    pub fn sites(&self) -> impl Iterator<Item = &SiteState> {
        self.sites.values()
    }

    pub fn servers(&self) -> impl Iterator<Item = &Server> {
        self.servers.values()
    }

    pub fn server(&self, id: &ServerId) -> Option<&Server> {
        self.servers.get(id)
    }

    pub fn fault_script(&self) -> &FaultScript {
        &self.script
    }

    pub fn is_link_down(&self, site: &SiteId) -> bool {
        self.links_down.contains(site)
    }

    /// Descriptor for `key` from any server, up or not.
    pub fn package(&self, key: &PackageKey) -> Option<&PackageDescriptor> {
        self.servers
            .values()
            .flat_map(|s| s.hosted.iter())
            .find(|p| p.app_name == key.app && p.version == key.version)
    }

    /// Records a copy of the affected site after every effect change.
    pub fn enable_history(&mut self) {
        self.history = Some(Vec::new());
    }

    pub fn history(&self) -> &[SiteState] {
        self.history.as_deref().unwrap_or(&[])
    }

    pub fn attempt_effects(&self, attempt: AttemptId) -> Option<&[Effect]> {
        self.attempts.get(attempt.0).map(|a| a.effects.as_slice())
    }

    pub fn attempt_action(&self, attempt: AttemptId) -> Option<ActionKind> {
        self.attempts.get(attempt.0).map(|a| a.action)
    }

    // ---- snapshots ----

    fn hash_sites(sites: &[SiteState]) -> SnapshotId {
        let bytes = serde_json::to_vec(sites).expect("site state serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Captures one site. The id is a content hash of the serialized state.
    pub fn snapshot(&mut self, site: &SiteId) -> Result<SnapshotId, WorldError> {
        let s = self
            .sites
            .get(site)
            .ok_or_else(|| WorldError::UnknownSite(site.clone()))?
            .clone();
        let states = vec![s];
        let id = Self::hash_sites(&states);
        self.snapshots.insert(id.clone(), states);
        Ok(id)
    }

    /// Captures every site of the world under one id.
    pub fn snapshot_all(&mut self) -> SnapshotId {
        let states: Vec<SiteState> = self.sites.values().cloned().collect();
        let id = Self::hash_sites(&states);
        self.snapshots.insert(id.clone(), states);
        id
    }

    pub fn snapshot_states(&self, id: &str) -> Result<&[SiteState], WorldError> {
        self.snapshots
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| WorldError::UnknownSnapshot(id.to_owned()))
    }

    /// Whether every captured site is back to its snapshot: same installed
    /// set (with active flags), same staged set, and the snapshot's log is
    /// still a prefix of the current log.
    pub fn restore_check(&self, id: &str) -> Result<bool, WorldError> {
        let states = self.snapshot_states(id)?;
        Ok(states.iter().all(|snap| {
            self.sites.get(&snap.id).is_some_and(|cur| {
                cur.installed == snap.installed
                    && cur.staged == snap.staged
                    && cur.platform_tags == snap.platform_tags
                    && cur.effect_log.starts_with(&snap.effect_log)
            })
        }))
    }

    // ---- attempt plumbing ----

    fn begin(&mut self, action: ActionKind, site: &SiteId) -> AttemptId {
        self.attempts.push(AttemptRecord {
            action,
            site: site.clone(),
            effects: Vec::new(),
            faults_fired: Vec::new(),
            rolled_back: false,
        });
        AttemptId(self.attempts.len() - 1)
    }

    /// Fires due faults. Returns an error when an action-error fault fired.
    fn check(
        &mut self,
        attempt: AttemptId,
        server: Option<&ServerId>,
        clock: u64,
        progress: f64,
        at_start: bool,
    ) -> Result<(), ActionFailure> {
        let rec = &self.attempts[attempt.0];
        let ctx = StepCtx {
            action: rec.action,
            site: &rec.site,
            server,
            clock,
            progress,
            at_start,
        };
        let due = self.fault_state.due(&self.script, &ctx);
        let mut raised = None;
        for i in due {
            let entry = &self.script.entries[i];
            self.attempts[attempt.0]
                .faults_fired
                .push(format!("{} => {}", entry.trigger, entry.fault));
            match &entry.fault {
                Fault::ServerDown(s) => {
                    if let Some(srv) = self.servers.get_mut(s) {
                        srv.up = false;
                    }
                }
                Fault::LinkDown(s) => {
                    self.links_down.insert(s.clone());
                }
                Fault::ActionError(detail) => {
                    raised.get_or_insert_with(|| ActionFailure::action(detail.clone()));
                }
            }
        }
        raised.map_or(Ok(()), Err)
    }

    fn reachable(&self, site: &SiteId, server: Option<&ServerId>) -> Result<(), ActionFailure> {
        if self.links_down.contains(site) {
            return Err(ActionFailure::new(
                ExceptionKind::NetworkFailure,
                format!("link to {site} is down"),
            ));
        }
        if let Some(s) = server {
            if !self.servers.get(s).is_some_and(|srv| srv.up) {
                return Err(ActionFailure::new(
                    ExceptionKind::NetworkFailure,
                    format!("server {s} is down"),
                ));
            }
        }
        Ok(())
    }

    fn record(&mut self, attempt: AttemptId, kind: EffectKind, subject: ComponentKey) -> Result<(), ActionFailure> {
        let site_id = self.attempts[attempt.0].site.clone();
        let site = self
            .sites
            .get_mut(&site_id)
            .ok_or_else(|| ActionFailure::action(format!("unknown site {site_id}")))?;
        let effect = site.apply(kind, subject).map_err(ActionFailure::action)?;
        self.attempts[attempt.0].effects.push(effect);
        if let Some(h) = &mut self.history {
            h.push(site.clone());
        }
        Ok(())
    }

    fn finish(
        &self,
        attempt: AttemptId,
        result: Result<Vec<Product>, ActionFailure>,
        progress: Option<f64>,
    ) -> ActionOutcome {
        let rec = &self.attempts[attempt.0];
        #[cfg(debug_assertions)]
        if let Some(site) = self.sites.get(&rec.site) {
            let replayed = crate::consistency::replay_oracle(&site.effect_log).expect("log is well-formed");
            debug_assert_eq!(replayed.installed, site.installed, "effect log diverged on {}", site.id);
            debug_assert_eq!(replayed.staged, site.staged, "effect log diverged on {}", site.id);
        }
        let mut context_updates = BTreeMap::new();
        if let Some(p) = progress {
            context_updates.insert(PROGRESS_VAR.to_owned(), Value::Fraction(p));
        }
        let (status, products_out) = match result {
            Ok(p) => (ActionStatus::Done, p),
            Err(f) => (ActionStatus::Raised(f), Vec::new()),
        };
        ActionOutcome {
            attempt,
            status,
            context_updates,
            products_out,
            site: rec.site.clone(),
            effects: rec.effects.clone(),
            faults_fired: rec.faults_fired.clone(),
        }
    }

    /// Runs `steps` effects one by one with fault checks around each.
    fn run_steps(
        &mut self,
        attempt: AttemptId,
        clock: u64,
        steps: Vec<(Option<ServerId>, EffectKind, ComponentKey)>,
        already_done: usize,
    ) -> (Result<(), ActionFailure>, f64) {
        let total = steps.len() + already_done;
        let frac = |done: usize| if total == 0 { 1.0 } else { done as f64 / total as f64 };
        let mut done = already_done;
        let first_server = steps.first().and_then(|s| s.0.clone());
        if let Err(e) = self.check(attempt, first_server.as_ref(), clock, frac(done), true) {
            return (Err(e), frac(done));
        }
        let site = self.attempts[attempt.0].site.clone();
        for (server, kind, subject) in steps {
            if let Err(e) = self.reachable(&site, server.as_ref()) {
                return (Err(e), frac(done));
            }
            if let Err(e) = self.record(attempt, kind, subject) {
                return (Err(e), frac(done));
            }
            done += 1;
            if let Err(e) = self.check(attempt, server.as_ref(), clock, frac(done), false) {
                return (Err(e), frac(done));
            }
        }
        (Ok(()), frac(done))
    }

    /// Undoes the effects of a failed attempt, newest first, and drops them
    /// from the log. Returns how many effects were removed.
    pub fn rollback_action(&mut self, attempt: AttemptId) -> Result<usize, WorldError> {
        let rec = self
            .attempts
            .get(attempt.0)
            .ok_or(WorldError::UnknownAttempt(attempt.0))?;
        if rec.rolled_back || rec.effects.is_empty() {
            return Ok(0);
        }
        let site = self
            .sites
            .get_mut(&rec.site)
            .ok_or_else(|| WorldError::UnknownSite(rec.site.clone()))?;
        let n = rec.effects.len();
        if site.effect_log.len() < n || site.effect_log[site.effect_log.len() - n..] != rec.effects[..] {
            return Err(WorldError::RollbackOutOfOrder(attempt.0));
        }
        for _ in 0..n {
            site.pop_effect();
        }
        if let Some(h) = &mut self.history {
            h.push(site.clone());
        }
        self.attempts[attempt.0].rolled_back = true;
        Ok(n)
    }

    // ---- actions ----

    /// Dispatches a request to the matching action.
    pub fn perform(&mut self, req: &ActionRequest<'_>) -> ActionOutcome {
        let site = self.resolve_site(req);
        if let Some(target) = req.compensating {
            return self.compensate(req.action, target, req.clock);
        }
        let attr = |k: &str| req.attributes.get(k).map(String::as_str);
        let location = find_input(req.inputs, products::PACKAGE_LOCATION);
        match req.action {
            ActionKind::Search => {
                let app = attr("app").or_else(|| location.and_then(|l| l.text("app")));
                let version = attr("version").or_else(|| location.and_then(|l| l.text("version")));
                match (app, version) {
                    (Some(app), Some(version)) => {
                        let restrict = attr("server").map(ServerId::from);
                        self.search_package(&site, &PackageKey::new(app, version), restrict.as_ref(), req.clock)
                    }
                    _ => self.failed(req.action, &site, ActionFailure::action("missing input: app and version")),
                }
            }
            ActionKind::Resolve => match packages_from(req).and_then(|p| p.last().cloned()) {
                Some(pkg) => self.resolve_dependencies(&site, &pkg, req.clock),
                None => self.failed(req.action, &site, ActionFailure::action("missing input: package")),
            },
            ActionKind::Transfer => {
                let Some(pkgs) = packages_from(req) else {
                    return self.failed(req.action, &site, ActionFailure::action("missing input: package"));
                };
                let source = TransferSource {
                    location: location.and_then(|l| {
                        Some((ServerId::from(l.text("server")?), PackageKey::new(l.text("app")?, l.text("version")?)))
                    }),
                    server: attr("server").map(ServerId::from),
                    mirror: attr("mirror") == Some("true"),
                };
                self.transfer(&site, &pkgs, &source, req.clock)
            }
            ActionKind::Install
            | ActionKind::Uninstall
            | ActionKind::Activate
            | ActionKind::Deactivate
            | ActionKind::Unstage => {
                let Some(pkgs) = packages_from(req) else {
                    return self.failed(req.action, &site, ActionFailure::action("missing input: package"));
                };
                let filter: Option<BTreeSet<String>> =
                    attr("components").map(|c| c.split(',').map(str::to_owned).collect());
                match req.action {
                    ActionKind::Install => self.install(&site, &pkgs, filter.as_ref(), req.clock),
                    ActionKind::Uninstall => self.uninstall(&site, &pkgs, filter.as_ref(), req.clock),
                    ActionKind::Activate => {
                        let restart = attr("restart")
                            .map(|r| r.split(',').map(ComponentKey::parse).collect::<Option<Vec<_>>>())
                            .unwrap_or(Some(Vec::new()));
                        match restart {
                            Some(r) => self.activate(&site, &pkgs, &r, req.clock),
                            None => self.failed(req.action, &site, ActionFailure::action("malformed restart list")),
                        }
                    }
                    ActionKind::Deactivate => self.deactivate(&site, &pkgs, req.clock),
                    _ => self.unstage(&site, &pkgs, req.clock),
                }
            }
        }
    }

    /// Site for an action: `site` attribute, then a `site` field on an
    /// input product, then the world's target.
    fn resolve_site(&self, req: &ActionRequest<'_>) -> SiteId {
        if let Some(s) = req.attributes.get("site") {
            return SiteId::from(s.as_str());
        }
        req.inputs
            .iter()
            .find_map(|p| p.text("site"))
            .map(SiteId::from)
            .unwrap_or_else(|| self.target.clone())
    }

    fn failed(&mut self, action: ActionKind, site: &SiteId, f: ActionFailure) -> ActionOutcome {
        let a = self.begin(action, site);
        self.finish(a, Err(f), None)
    }

    fn site_checked(&self, site: &SiteId) -> Result<&SiteState, ActionFailure> {
        self.sites
            .get(site)
            .ok_or_else(|| ActionFailure::action(format!("unknown site {site}")))
    }

    /// Lowest-id up server hosting `key`. `restrict` limits the search to
    /// one server.
    pub fn search_package(
        &mut self,
        site: &SiteId,
        key: &PackageKey,
        restrict: Option<&ServerId>,
        clock: u64,
    ) -> ActionOutcome {
        let a = self.begin(ActionKind::Search, site);
        let result = (|| {
            self.check(a, None, clock, 0.0, true)?;
            let hosting: Vec<&Server> = self
                .servers
                .values()
                .filter(|s| restrict.is_none_or(|r| *r == s.id) && s.hosts(key))
                .collect();
            if hosting.is_empty() {
                return Err(ActionFailure::action(format!("package not found: {key}")));
            }
            let Some(server) = hosting.iter().find(|s| s.up) else {
                return Err(ActionFailure::new(
                    ExceptionKind::ServerDown,
                    format!("no reachable server hosts {key}"),
                ));
            };
            Ok(vec![Product::new(products::PACKAGE_LOCATION)
                .with("server", Value::Text(server.id.to_string()))
                .with("app", Value::Text(key.app.clone()))
                .with("version", Value::Text(key.version.clone()))])
        })();
        self.finish(a, result, None)
    }

    /// Install order for `root` and the dependencies the site still lacks,
    /// dependencies first.
    pub fn resolve_dependencies(&mut self, site: &SiteId, root: &PackageKey, clock: u64) -> ActionOutcome {
        let a = self.begin(ActionKind::Resolve, site);
        let result = (|| {
            self.check(a, None, clock, 0.0, true)?;
            self.reachable(site, None)?;
            let state = self.site_checked(site)?;
            let mut out = Vec::new();
            let mut visiting = BTreeSet::new();
            let mut done = BTreeSet::new();
            self.closure(state, root, &mut visiting, &mut done, &mut out)?;
            Ok(vec![Product::new(products::INSTALL_PLAN).with("packages", Value::Text(join_packages(&out)))])
        })();
        self.finish(a, result, None)
    }

    fn closure(
        &self,
        site: &SiteState,
        key: &PackageKey,
        visiting: &mut BTreeSet<PackageKey>,
        done: &mut BTreeSet<PackageKey>,
        out: &mut Vec<PackageKey>,
    ) -> Result<(), ActionFailure> {
        if done.contains(key) {
            return Ok(());
        }
        if !visiting.insert(key.clone()) {
            return Err(ActionFailure::new(
                ExceptionKind::DependencyConflict,
                format!("dependency cycle through {key}"),
            ));
        }
        let desc = self
            .package(key)
            .ok_or_else(|| ActionFailure::action(format!("package not found: {key}")))?;
        let mut deps: Vec<&Dependency> = desc.depends_on.iter().collect();
        deps.sort_by(|a, b| a.app.cmp(&b.app));
        for dep in deps {
            let installed = site.installed_versions(&dep.app);
            if !installed.is_empty() {
                if installed.iter().any(|v| dep.constraint.satisfied_by(v)) {
                    continue;
                }
                let have: Vec<&str> = installed.into_iter().collect();
                return Err(ActionFailure::new(
                    ExceptionKind::DependencyConflict,
                    format!(
                        "{key} requires {} {} but {} has {}",
                        dep.app,
                        dep.constraint,
                        site.id,
                        have.join(",")
                    ),
                ));
            }
            let best = self
                .servers
                .values()
                .filter(|s| s.up)
                .flat_map(|s| s.hosted.iter())
                .filter(|p| p.app_name == dep.app && dep.constraint.satisfied_by(&p.version))
                .max_by(|a, b| compare_versions(&a.version, &b.version).then_with(|| a.version.cmp(&b.version)))
                .map(PackageDescriptor::key)
                .ok_or_else(|| ActionFailure::action(format!("no package satisfies {} {}", dep.app, dep.constraint)))?;
            self.closure(site, &best, visiting, done, out)?;
        }
        visiting.remove(key);
        done.insert(key.clone());
        let fully_installed = desc.components.iter().all(|c| site.is_installed(&key.component(&c.id)));
        if !fully_installed {
            out.push(key.clone());
        }
        Ok(())
    }

    /// Stages every unit of `packages` on `site`, one unit per step, and
    /// reports `progress_fraction = staged / total` throughout.
    pub fn transfer(
        &mut self,
        site: &SiteId,
        packages: &[PackageKey],
        source: &TransferSource,
        clock: u64,
    ) -> ActionOutcome {
        let a = self.begin(ActionKind::Transfer, site);
        let mut progress = 0.0;
        let result = (|| {
            let state = self.site_checked(site)?;
            let mut steps = Vec::new();
            let mut already = 0;
            for pkg in packages {
                let server = self.source_for(pkg, source)?;
                let desc = self
                    .package(pkg)
                    .ok_or_else(|| ActionFailure::action(format!("package not found: {pkg}")))?;
                for comp in &desc.components {
                    for unit in comp.units() {
                        let key = pkg.component(&unit);
                        if state.staged.contains(&key) {
                            already += 1;
                        } else {
                            steps.push((Some(server.clone()), EffectKind::FileStaged, key));
                        }
                    }
                }
            }
            let total = (steps.len() + already) as i64;
            let (r, p) = self.run_steps(a, clock, steps, already);
            progress = p;
            r?;
            Ok(vec![Product::new(products::STAGED_PACKAGE)
                .with("site", Value::Text(site.to_string()))
                .with("packages", Value::Text(join_packages(packages)))
                .with("units", Value::Integer(total))])
        })();
        self.finish(a, result, Some(progress))
    }

    fn source_for(&self, pkg: &PackageKey, source: &TransferSource) -> Result<ServerId, ActionFailure> {
        if let Some(s) = &source.server {
            return match self.servers.get(s) {
                Some(srv) if srv.hosts(pkg) => Ok(s.clone()),
                _ => Err(ActionFailure::action(format!("server {s} does not host {pkg}"))),
            };
        }
        let hosting = || self.servers.values().filter(|s| s.hosts(pkg));
        if let Some((loc_server, loc_pkg)) = &source.location {
            if loc_pkg == pkg {
                if !source.mirror {
                    return Ok(loc_server.clone());
                }
                return hosting()
                    .find(|s| s.up && s.id != *loc_server)
                    .map(|s| s.id.clone())
                    .ok_or_else(|| {
                        ActionFailure::new(ExceptionKind::ServerDown, format!("no mirror server hosts {pkg}"))
                    });
            }
        }
        hosting()
            .find(|s| s.up)
            .or_else(|| hosting().next())
            .map(|s| s.id.clone())
            .ok_or_else(|| ActionFailure::action(format!("package not found: {pkg}")))
    }

    /// Installs the components of staged packages, optionally restricted to
    /// `only` component ids.
    pub fn install(
        &mut self,
        site: &SiteId,
        packages: &[PackageKey],
        only: Option<&BTreeSet<String>>,
        clock: u64,
    ) -> ActionOutcome {
        let a = self.begin(ActionKind::Install, site);
        let mut progress = 0.0;
        let result = (|| {
            self.check(a, None, clock, 0.0, true)?;
            self.reachable(site, None)?;
            let state = self.site_checked(site)?;
            let mut steps = Vec::new();
            let mut missing_units = 0;
            let mut already = 0;
            for pkg in packages {
                let desc = self
                    .package(pkg)
                    .ok_or_else(|| ActionFailure::action(format!("package not found: {pkg}")))?;
                if let Some(tag) = desc.requires_tags.iter().find(|t| !state.platform_tags.contains(*t)) {
                    return Err(ActionFailure::new(
                        ExceptionKind::PlatformIncompatible,
                        format!("{pkg} requires platform tag {tag} absent from {site}"),
                    ));
                }
                for comp in desc.components.iter().filter(|c| only.is_none_or(|o| o.contains(&c.id))) {
                    missing_units += comp.units().filter(|u| !state.staged.contains(&pkg.component(u))).count();
                    let key = pkg.component(&comp.id);
                    if state.is_installed(&key) {
                        already += 1;
                    } else {
                        steps.push((None, EffectKind::ComponentInstalled, key));
                    }
                }
            }
            if missing_units > 0 || (steps.is_empty() && already == 0) {
                return Err(ActionFailure::action(format!(
                    "incomplete staging: {missing_units} units missing"
                )));
            }
            // Start check already ran above.
            let (r, p) = self.run_steps_after_start(a, clock, steps, already);
            progress = p;
            r?;
            Ok(vec![Product::new(products::INSTALLED_PACKAGE)
                .with("site", Value::Text(site.to_string()))
                .with("packages", Value::Text(join_packages(packages)))])
        })();
        self.finish(a, result, Some(progress))
    }

    fn run_steps_after_start(
        &mut self,
        attempt: AttemptId,
        clock: u64,
        steps: Vec<(Option<ServerId>, EffectKind, ComponentKey)>,
        already: usize,
    ) -> (Result<(), ActionFailure>, f64) {
        let total = steps.len() + already;
        let frac = |done: usize| if total == 0 { 1.0 } else { done as f64 / total as f64 };
        let site = self.attempts[attempt.0].site.clone();
        let mut done = already;
        for (server, kind, subject) in steps {
            if let Err(e) = self.reachable(&site, server.as_ref()) {
                return (Err(e), frac(done));
            }
            if let Err(e) = self.record(attempt, kind, subject) {
                return (Err(e), frac(done));
            }
            done += 1;
            if let Err(e) = self.check(attempt, server.as_ref(), clock, frac(done), false) {
                return (Err(e), frac(done));
            }
        }
        (Ok(()), frac(done))
    }

    fn components_of(&self, pkg: &PackageKey, only: Option<&BTreeSet<String>>) -> Result<Vec<ComponentKey>, ActionFailure> {
        let desc = self
            .package(pkg)
            .ok_or_else(|| ActionFailure::action(format!("package not found: {pkg}")))?;
        Ok(desc
            .components
            .iter()
            .filter(|c| only.is_none_or(|o| o.contains(&c.id)))
            .map(|c| pkg.component(&c.id))
            .collect())
    }

    /// Removes components; active ones are deactivated first.
    pub fn uninstall(
        &mut self,
        site: &SiteId,
        packages: &[PackageKey],
        only: Option<&BTreeSet<String>>,
        clock: u64,
    ) -> ActionOutcome {
        let a = self.begin(ActionKind::Uninstall, site);
        let mut progress = 0.0;
        let result = (|| {
            let state = self.site_checked(site)?;
            let mut steps = Vec::new();
            for pkg in packages {
                for key in self.components_of(pkg, only)? {
                    match state.installed.get(&key) {
                        None if only.is_some() => {
                            return Err(ActionFailure::action(format!("component {key} not installed")))
                        }
                        None => {}
                        Some(active) => {
                            if *active {
                                steps.push((None, EffectKind::Deactivated, key.clone()));
                            }
                            steps.push((None, EffectKind::ComponentRemoved, key));
                        }
                    }
                }
            }
            if steps.is_empty() {
                return Err(ActionFailure::action(format!(
                    "component not installed: nothing of {} on {site}",
                    join_packages(packages)
                )));
            }
            let (r, p) = self.run_steps(a, clock, steps, 0);
            progress = p;
            r.map(|_| Vec::new())
        })();
        self.finish(a, result, Some(progress))
    }

    /// Activates installed components. `restart` components are deactivated
    /// before and reactivated after.
    pub fn activate(
        &mut self,
        site: &SiteId,
        packages: &[PackageKey],
        restart: &[ComponentKey],
        clock: u64,
    ) -> ActionOutcome {
        let a = self.begin(ActionKind::Activate, site);
        let mut progress = 0.0;
        let result = (|| {
            let state = self.site_checked(site)?;
            let mut steps = Vec::new();
            for r in restart {
                if !state.is_active(r) {
                    return Err(ActionFailure::action(format!("{r} is not active; cannot restart")));
                }
                steps.push((None, EffectKind::Deactivated, r.clone()));
            }
            for pkg in packages {
                for key in self.components_of(pkg, None)? {
                    if state.installed.get(&key) == Some(&false) {
                        steps.push((None, EffectKind::Activated, key));
                    }
                }
            }
            for r in restart {
                steps.push((None, EffectKind::Activated, r.clone()));
            }
            let (r, p) = self.run_steps(a, clock, steps, 0);
            progress = p;
            r.map(|_| Vec::new())
        })();
        self.finish(a, result, Some(progress))
    }

    pub fn deactivate(&mut self, site: &SiteId, packages: &[PackageKey], clock: u64) -> ActionOutcome {
        let a = self.begin(ActionKind::Deactivate, site);
        let mut progress = 0.0;
        let result = (|| {
            let state = self.site_checked(site)?;
            let mut steps = Vec::new();
            for pkg in packages {
                for key in self.components_of(pkg, None)? {
                    if state.is_active(&key) {
                        steps.push((None, EffectKind::Deactivated, key));
                    }
                }
            }
            let (r, p) = self.run_steps(a, clock, steps, 0);
            progress = p;
            r.map(|_| Vec::new())
        })();
        self.finish(a, result, Some(progress))
    }

    pub fn unstage(&mut self, site: &SiteId, packages: &[PackageKey], clock: u64) -> ActionOutcome {
        let a = self.begin(ActionKind::Unstage, site);
        let mut progress = 0.0;
        let result = (|| {
            let state = self.site_checked(site)?;
            let steps: Vec<_> = state
                .staged
                .iter()
                .filter(|u| packages.contains(&u.package()))
                .map(|u| (None, EffectKind::FileUnstaged, u.clone()))
                .collect();
            let (r, p) = self.run_steps(a, clock, steps, 0);
            progress = p;
            r.map(|_| Vec::new())
        })();
        self.finish(a, result, Some(progress))
    }

    /// Runs `action` as the compensation of an earlier successful attempt:
    /// the target's effects of the kinds this action knows how to undo are
    /// inverted, newest first, as ordinary new effects.
    pub fn compensate(&mut self, action: ActionKind, target: AttemptId, clock: u64) -> ActionOutcome {
        let Some(rec) = self.attempts.get(target.0) else {
            let site = self.target.clone();
            return self.failed(action, &site, ActionFailure::action(format!("unknown attempt {}", target.0)));
        };
        let handled: &[EffectKind] = match action {
            ActionKind::Unstage => &[EffectKind::FileStaged],
            ActionKind::Uninstall => &[EffectKind::ComponentInstalled, EffectKind::Activated],
            ActionKind::Deactivate => &[EffectKind::Activated, EffectKind::Deactivated],
            ActionKind::Activate => &[EffectKind::Deactivated],
            ActionKind::Install => &[EffectKind::ComponentRemoved, EffectKind::Deactivated],
            ActionKind::Transfer => &[EffectKind::FileUnstaged],
            ActionKind::Search | ActionKind::Resolve => &[],
        };
        let site = rec.site.clone();
        let steps: Vec<_> = rec
            .effects
            .iter()
            .rev()
            .filter(|e| handled.contains(&e.kind))
            .map(|e| (None, e.kind.inverse(), e.subject.clone()))
            .collect();
        let a = self.begin(action, &site);
        let (r, p) = self.run_steps(a, clock, steps, 0);
        self.finish(a, r.map(|_| Vec::new()), Some(p))
    }
}

/// Where a transfer pulls packages from.
#[derive(Clone, Debug, Default)]
pub struct TransferSource {
    /// Server found by search, and the package it was found for.
    pub location: Option<(ServerId, PackageKey)>,
    /// Forces every package to come from this server.
    pub server: Option<ServerId>,
    /// Pull the located package from another server instead.
    pub mirror: bool,
}

fn find_input<'a>(inputs: &'a [Product], type_name: &str) -> Option<&'a Product> {
    inputs.iter().find(|p| p.type_name == type_name)
}

/// Packages an action operates on: `app`/`version` attributes, else a
/// package list carried by an input product, else the searched location.
fn packages_from(req: &ActionRequest<'_>) -> Option<Vec<PackageKey>> {
    if let (Some(app), Some(version)) = (req.attributes.get("app"), req.attributes.get("version")) {
        return Some(vec![PackageKey::new(app, version)]);
    }
    for ty in [products::STAGED_PACKAGE, products::INSTALLED_PACKAGE, products::INSTALL_PLAN] {
        if let Some(list) = find_input(req.inputs, ty).and_then(|p| p.text("packages")) {
            return split_packages(list);
        }
    }
    let loc = find_input(req.inputs, products::PACKAGE_LOCATION)?;
    Some(vec![PackageKey::new(loc.text("app")?, loc.text("version")?)])
}

#[cfg(test)]
mod tests;
