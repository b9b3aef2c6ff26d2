use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use super::graph::{self, parent_map};
use super::types::*;
use super::ModelError;
use crate::ids::{is_identifier, ActivityId};

/// A broken well-formedness rule, tied to the element that breaks it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub element: String,
    pub message: String,
}

impl Violation {
    fn new(element: impl fmt::Display, message: impl Into<String>) -> Self {
        Self {
            element: element.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.element, self.message)
    }
}

/// A process definition that passed [`validate`]. Immutable; the forward
/// order is computed once.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidatedProcess {
    def: ProcessDefinition,
    order: Vec<ActivityId>,
}

impl ValidatedProcess {
    pub fn definition(&self) -> &ProcessDefinition {
        &self.def
    }

    pub fn into_inner(self) -> ProcessDefinition {
        self.def
    }

    pub fn execution_order(&self) -> &[ActivityId] {
        &self.order
    }

    pub fn position(&self, id: &ActivityId) -> Option<usize> {
        self.order.iter().position(|a| a == id)
    }

    pub fn nearest_savepoint(&self, failed: &ActivityId) -> SavepointRef {
        graph::nearest_savepoint(&self.def, &self.order, failed)
    }

    pub fn compensation_chain(
        &self,
        from: &ActivityId,
        to: &SavepointRef,
    ) -> Result<Vec<ActivityId>, ModelError> {
        graph::compensation_chain(&self.def, &self.order, from, to)
    }
}

impl std::ops::Deref for ValidatedProcess {
    type Target = ProcessDefinition;

    fn deref(&self) -> &ProcessDefinition {
        &self.def
    }
}

/// Checks every well-formedness rule and reports all violations found. On
/// success the definition is returned normalized (activities sorted by id,
/// product types by name).
pub fn validate(mut process: ProcessDefinition) -> Result<ValidatedProcess, Vec<Violation>> {
    process.normalize();
    let mut v = Vec::new();
    let p = &process;

    if !is_identifier(&p.name) {
        v.push(Violation::new(&p.name, "process name must be an identifier"));
    }

    check_product_types(p, &mut v);
    check_activities(p, &mut v);
    check_dataflows(p, &mut v);
    check_policy(p, &mut v);

    match p.activity(p.entry_activity.as_str()) {
        None => v.push(Violation::new(&p.entry_activity, "entry activity does not exist")),
        Some(a) if a.is_recovery() => v.push(Violation::new(
            &p.entry_activity,
            "entry activity cannot be a recovery activity",
        )),
        Some(_) => check_reachability(p, &mut v),
    }

    // Order-dependent rules only make sense once the structure is sound.
    if v.is_empty() {
        match graph::execution_order(p) {
            Err(ModelError::CycleDetected(id)) => {
                v.push(Violation::new(id, "OK dataflows form a cycle"))
            }
            Err(e) => v.push(Violation::new(&p.name, e.to_string())),
            Ok(order) => {
                check_order_respects_flows(p, &order, &mut v);
                check_recoverability(p, &order, &mut v);
                if v.is_empty() {
                    return Ok(ValidatedProcess {
                        def: process,
                        order,
                    });
                }
            }
        }
    }
    Err(v)
}

fn check_product_types(p: &ProcessDefinition, v: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    for t in &p.product_types {
        if !seen.insert(t.name.as_str()) {
            v.push(Violation::new(&t.name, "duplicate product type"));
        }
        if !is_identifier(&t.name) {
            v.push(Violation::new(&t.name, "product type name must be an identifier"));
        }
    }
}

fn check_activities(p: &ProcessDefinition, v: &mut Vec<Violation>) {
    let mut seen = BTreeSet::new();
    for a in &p.activities {
        if !seen.insert(&a.id) {
            v.push(Violation::new(&a.id, "duplicate activity id"));
        }
    }
    let parents = parent_map(p);
    let mut contingency_targets: BTreeMap<&ActivityId, usize> = BTreeMap::new();
    let mut compensation_targets: BTreeMap<&ActivityId, usize> = BTreeMap::new();

    for a in &p.activities {
        let id = &a.id;
        if !is_identifier(id.as_str()) {
            v.push(Violation::new(id, "activity id must be an identifier"));
        }
        match a.kind {
            ActivityKind::Composite => {
                if a.children.is_empty() {
                    v.push(Violation::new(id, "composite activity needs at least one child"));
                }
                if a.action.is_some() {
                    v.push(Violation::new(id, "composite activity cannot have an action"));
                }
                if a.savepoint.is_some() {
                    v.push(Violation::new(id, "savepoints attach to simple activities only"));
                }
                if a.is_recovery() {
                    v.push(Violation::new(id, "recovery activities must be simple"));
                }
            }
            ActivityKind::Simple => {
                if !a.children.is_empty() {
                    v.push(Violation::new(id, "simple activity cannot have children"));
                }
                match &a.action {
                    None => v.push(Violation::new(id, "simple activity needs an action")),
                    Some(r) if r.kind().is_none() => {
                        v.push(Violation::new(id, format!("unknown action {r}")))
                    }
                    Some(_) => {}
                }
            }
        }

        let mut child_seen = BTreeSet::new();
        for c in &a.children {
            if !child_seen.insert(c) {
                v.push(Violation::new(id, format!("child {c} listed twice")));
            }
            match p.activity(c.as_str()) {
                None => v.push(Violation::new(id, format!("child {c} does not exist"))),
                Some(child) if child.is_recovery() => v.push(Violation::new(
                    id,
                    format!("child {c} is a recovery activity"),
                )),
                Some(_) => {
                    if parents.get(c).is_some_and(|owner| owner != id) {
                        v.push(Violation::new(c, "activity belongs to more than one composite"));
                    }
                }
            }
        }

        if a.contingency_of.is_some() && a.compensation_of.is_some() {
            v.push(Violation::new(
                id,
                "contingency_of and compensation_of are mutually exclusive",
            ));
        }
        for (target, label, counts) in [
            (&a.contingency_of, "contingency", &mut contingency_targets),
            (&a.compensation_of, "compensation", &mut compensation_targets),
        ] {
            let Some(target) = target else { continue };
            *counts.entry(target).or_default() += 1;
            match p.activity(target.as_str()) {
                None => v.push(Violation::new(id, format!("{label} target {target} does not exist"))),
                Some(t) if t.is_recovery() => v.push(Violation::new(
                    id,
                    format!("{label} target {target} is itself a recovery activity"),
                )),
                Some(t) if t.kind == ActivityKind::Composite => v.push(Violation::new(
                    id,
                    format!("{label} target {target} must be a simple activity"),
                )),
                Some(_) => {}
            }
        }
        if a.is_recovery() {
            if a.savepoint.is_some() {
                v.push(Violation::new(id, "recovery activities cannot carry a savepoint"));
            }
            if parents.contains_key(id) {
                v.push(Violation::new(id, "recovery activities cannot be composite children"));
            }
        }

        let mut port_ids = BTreeSet::new();
        for port in &a.ports {
            if !port_ids.insert(&port.id) {
                v.push(Violation::new(format!("{id}.{}", port.id), "duplicate port id"));
            }
            if p.product_type(&port.product_type).is_none() {
                v.push(Violation::new(
                    format!("{id}.{}", port.id),
                    format!("unknown product type {}", port.product_type),
                ));
            }
        }
        let ko_outs = a
            .ports
            .iter()
            .filter(|p| p.direction == Direction::Out && p.channel == Channel::Ko)
            .count();
        if ko_outs != 1 {
            v.push(Violation::new(
                id,
                format!("activity must have exactly one out/ko port, found {ko_outs}"),
            ));
        }

        let mut var_names = BTreeSet::new();
        for var in &a.context_vars {
            if !var_names.insert(var.name.as_str()) {
                v.push(Violation::new(id, format!("duplicate context variable {}", var.name)));
            }
            if var.updated_by.kind().is_none() {
                v.push(Violation::new(
                    id,
                    format!("context variable {} updated by unknown action {}", var.name, var.updated_by),
                ));
            }
        }
    }

    for (target, n) in contingency_targets {
        if n > 1 {
            v.push(Violation::new(target, "more than one contingency activity"));
        }
    }
    for (target, n) in compensation_targets {
        if n > 1 {
            v.push(Violation::new(target, "more than one compensation activity"));
        }
    }

    if let Some(id) = composite_cycle(p) {
        v.push(Violation::new(id, "composite activity contains itself"));
    }
}

fn composite_cycle(p: &ProcessDefinition) -> Option<ActivityId> {
    let parents = parent_map(p);
    for start in parents.keys() {
        let mut cur = start;
        for _ in 0..=parents.len() {
            match parents.get(cur) {
                Some(next) if next == start => return Some(start.clone()),
                Some(next) => cur = next,
                None => break,
            }
        }
    }
    None
}

fn check_dataflows(p: &ProcessDefinition, v: &mut Vec<Violation>) {
    for flow in &p.dataflows {
        let label = format!("{} -> {}", flow.from, flow.to);
        let from = p
            .activity(flow.from.activity.as_str())
            .and_then(|a| a.port(flow.from.port.as_str()));
        let to = p
            .activity(flow.to.activity.as_str())
            .and_then(|a| a.port(flow.to.port.as_str()));
        if from.is_none() {
            v.push(Violation::new(&label, format!("unknown source endpoint {}", flow.from)));
        }
        if to.is_none() {
            v.push(Violation::new(&label, format!("unknown target endpoint {}", flow.to)));
        }
        let (Some(from), Some(to)) = (from, to) else {
            continue;
        };
        if from.direction != Direction::Out {
            v.push(Violation::new(&label, "dataflow source must be Out port"));
        }
        if to.direction != Direction::In {
            v.push(Violation::new(&label, "dataflow target must be In port"));
        }
        if from.product_type != to.product_type {
            v.push(Violation::new(
                &label,
                format!(
                    "product type mismatch: {} vs {}",
                    from.product_type, to.product_type
                ),
            ));
        }
        if from.channel != to.channel {
            let msg = match from.channel {
                Channel::Ko => "KO dataflow must target an In/KO port",
                Channel::Ok => "OK dataflow must target an In/OK port",
            };
            v.push(Violation::new(&label, msg));
        }
    }
}

fn check_policy(p: &ProcessDefinition, v: &mut Vec<Violation>) {
    let Some(policy) = &p.multi_site_policy else {
        return;
    };
    match (policy.mode, policy.min_success_fraction) {
        (MultiSiteMode::BestEffort, None) => v.push(Violation::new(
            &p.name,
            "best-effort policy needs min-success-fraction",
        )),
        (MultiSiteMode::AllOrNothing, Some(_)) => v.push(Violation::new(
            &p.name,
            "min-success-fraction only applies to best-effort",
        )),
        (_, Some(f)) if !(0.0..=1.0).contains(&f) => v.push(Violation::new(
            &p.name,
            "min-success-fraction must lie in [0, 1]",
        )),
        _ => {}
    }
}

/// Reachability over every structural edge: dataflows of both channels,
/// composite membership and recovery bindings.
fn check_reachability(p: &ProcessDefinition, v: &mut Vec<Violation>) {
    let mut adj: BTreeMap<&ActivityId, Vec<&ActivityId>> = BTreeMap::new();
    for flow in &p.dataflows {
        adj.entry(&flow.from.activity).or_default().push(&flow.to.activity);
    }
    for a in &p.activities {
        for c in &a.children {
            adj.entry(&a.id).or_default().push(c);
        }
        for target in a.contingency_of.iter().chain(&a.compensation_of) {
            adj.entry(target).or_default().push(&a.id);
        }
    }
    let mut seen = BTreeSet::from([&p.entry_activity]);
    let mut queue = VecDeque::from([&p.entry_activity]);
    while let Some(cur) = queue.pop_front() {
        for next in adj.get(cur).into_iter().flatten() {
            if seen.insert(*next) {
                queue.push_back(next);
            }
        }
    }
    // A child is reachable when its composite is.
    for a in &p.activities {
        if !seen.contains(&a.id) {
            v.push(Violation::new(&a.id, "not reachable from the entry activity"));
        }
    }
}

fn check_order_respects_flows(p: &ProcessDefinition, order: &[ActivityId], v: &mut Vec<Violation>) {
    let pos: BTreeMap<&ActivityId, usize> = order.iter().enumerate().map(|(i, a)| (a, i)).collect();
    let span = |id: &ActivityId| -> Option<(usize, usize)> {
        let mut stack = vec![id];
        let mut lo = usize::MAX;
        let mut hi = 0;
        while let Some(cur) = stack.pop() {
            if let Some(&i) = pos.get(cur) {
                lo = lo.min(i);
                hi = hi.max(i);
            }
            if let Some(a) = p.activity(cur.as_str()) {
                stack.extend(a.children.iter());
            }
        }
        (lo != usize::MAX).then_some((lo, hi))
    };
    for flow in &p.dataflows {
        let ok = p
            .activity(flow.from.activity.as_str())
            .and_then(|a| a.port(flow.from.port.as_str()))
            .is_some_and(|port| port.channel == Channel::Ok);
        if !ok {
            continue;
        }
        if let (Some((_, from_hi)), Some((to_lo, _))) = (span(&flow.from.activity), span(&flow.to.activity)) {
            if from_hi >= to_lo {
                v.push(Violation::new(
                    format!("{} -> {}", flow.from, flow.to),
                    "composite child order contradicts dataflow",
                ));
            }
        }
    }
}

fn check_recoverability(p: &ProcessDefinition, order: &[ActivityId], v: &mut Vec<Violation>) {
    for id in order {
        let Some(act) = p.activity(id.as_str()) else { continue };
        if !act.is_critical() || p.contingency_for(id.as_str()).is_some() {
            continue;
        }
        let sp = graph::nearest_savepoint(p, order, id);
        if let Err(ModelError::UncompensatableChain(blocker)) =
            graph::compensation_chain(p, order, id, &sp)
        {
            v.push(Violation::new(
                id,
                format!(
                    "critical activity has no contingency and no compensation path to {sp} ({blocker} cannot be compensated)"
                ),
            ));
        }
    }
}
