//! Graph queries over a process definition: forward order, savepoint lookup
//! and compensation chains.

use std::collections::{BTreeMap, BTreeSet};

use super::types::{Channel, ProcessDefinition, SavepointAt, SavepointRef};
use super::ModelError;
use crate::ids::ActivityId;

/// Forward execution order of the main (non-recovery) simple activities.
///
/// Top-level activities are sorted topologically over OK dataflows with ties
/// broken by ascending id, which yields the lexicographically least order.
/// Composites are then expanded to their children in declared order.
pub fn execution_order(process: &ProcessDefinition) -> Result<Vec<ActivityId>, ModelError> {
    let parents = parent_map(process);
    let top_level: BTreeSet<&ActivityId> = process
        .activities
        .iter()
        .filter(|a| !a.is_recovery() && !parents.contains_key(&a.id))
        .map(|a| &a.id)
        .collect();

    let mut succ: BTreeMap<&ActivityId, BTreeSet<&ActivityId>> = BTreeMap::new();
    let mut indegree: BTreeMap<&ActivityId, usize> = top_level.iter().map(|id| (*id, 0)).collect();
    for flow in &process.dataflows {
        let Some(src) = process.activity(flow.from.activity.as_str()) else {
            continue;
        };
        if src.port(flow.from.port.as_str()).map(|p| p.channel) != Some(Channel::Ok) {
            continue;
        }
        let (Some(a), Some(b)) = (
            top_ancestor(&flow.from.activity, &parents),
            top_ancestor(&flow.to.activity, &parents),
        ) else {
            continue;
        };
        if a == b || !top_level.contains(a) || !top_level.contains(b) {
            continue;
        }
        if succ.entry(a).or_default().insert(b) {
            *indegree.get_mut(b).expect("top-level node") += 1;
        }
    }

    let mut ready: BTreeSet<&ActivityId> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut sorted = Vec::with_capacity(top_level.len());
    while let Some(next) = ready.pop_first() {
        sorted.push(next);
        for s in succ.get(next).into_iter().flatten() {
            let d = indegree.get_mut(s).expect("top-level node");
            *d -= 1;
            if *d == 0 {
                ready.insert(s);
            }
        }
    }
    if sorted.len() != top_level.len() {
        let stuck = indegree
            .iter()
            .find(|(id, d)| **d > 0 && !sorted.contains(id))
            .map(|(id, _)| (*id).clone())
            .expect("a node remains in the cycle");
        return Err(ModelError::CycleDetected(stuck));
    }

    let mut order = Vec::new();
    let mut visiting = BTreeSet::new();
    for id in sorted {
        expand(process, id, &mut order, &mut visiting)?;
    }
    Ok(order)
}

fn expand(
    process: &ProcessDefinition,
    id: &ActivityId,
    out: &mut Vec<ActivityId>,
    visiting: &mut BTreeSet<ActivityId>,
) -> Result<(), ModelError> {
    let Some(act) = process.activity(id.as_str()) else {
        return Ok(());
    };
    if act.children.is_empty() && act.action.is_some() {
        out.push(id.clone());
        return Ok(());
    }
    if !visiting.insert(id.clone()) {
        return Err(ModelError::CycleDetected(id.clone()));
    }
    for child in &act.children {
        expand(process, child, out, visiting)?;
    }
    visiting.remove(id);
    Ok(())
}

/// child id -> composite parent id
pub(crate) fn parent_map(process: &ProcessDefinition) -> BTreeMap<ActivityId, ActivityId> {
    let mut parents = BTreeMap::new();
    for a in &process.activities {
        for c in &a.children {
            parents.entry(c.clone()).or_insert_with(|| a.id.clone());
        }
    }
    parents
}

fn top_ancestor<'a>(
    id: &'a ActivityId,
    parents: &'a BTreeMap<ActivityId, ActivityId>,
) -> Option<&'a ActivityId> {
    let mut cur = id;
    for _ in 0..=parents.len() {
        match parents.get(cur) {
            Some(p) => cur = p,
            None => return Some(cur),
        }
    }
    // Parent chain loops; validation reports it separately.
    None
}

/// The savepoint backward recovery targets when `failed` fails: the one
/// attached to the latest activity strictly before `failed` in `order`, or
/// process start.
pub fn nearest_savepoint(
    process: &ProcessDefinition,
    order: &[ActivityId],
    failed: &ActivityId,
) -> SavepointRef {
    let Some(pos) = order.iter().position(|a| a == failed) else {
        return SavepointRef::process_start();
    };
    order[..pos]
        .iter()
        .rev()
        .find_map(|id| {
            let act = process.activity(id.as_str())?;
            act.savepoint.map(|scope| SavepointRef::at_activity(id.clone(), scope))
        })
        .unwrap_or_else(SavepointRef::process_start)
}

/// One activity to undo during backward recovery.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompensationStep {
    pub target: ActivityId,
    /// `None` for activities without a compensation binding.
    pub compensation: Option<ActivityId>,
    pub uncompensatable: bool,
}

/// Index in `order` of the first activity after the savepoint.
pub(crate) fn span_start(order: &[ActivityId], to: &SavepointRef) -> Result<usize, ModelError> {
    match &to.at {
        SavepointAt::ProcessStart => Ok(0),
        SavepointAt::Activity(id) => order
            .iter()
            .position(|a| a == id)
            .map(|p| p + 1)
            .ok_or_else(|| ModelError::UnknownActivity(id.clone())),
    }
}

/// Every activity in `order[start..end]`, last first, with its compensation
/// binding.
pub fn compensation_plan(
    process: &ProcessDefinition,
    order: &[ActivityId],
    start: usize,
    end: usize,
) -> Vec<CompensationStep> {
    order[start.min(end)..end]
        .iter()
        .rev()
        .filter_map(|id| {
            let act = process.activity(id.as_str())?;
            let compensation = process.compensation_for(id.as_str()).map(|c| c.id.clone());
            let effectful = act.action_kind().is_some_and(|k| k.is_effectful());
            Some(CompensationStep {
                target: id.clone(),
                uncompensatable: compensation.is_none() && act.is_critical() && effectful,
                compensation,
            })
        })
        .collect()
}

/// Compensation activities to run, in order, to go back from `from` (which
/// failed and is excluded) to the savepoint `to`.
pub fn compensation_chain(
    process: &ProcessDefinition,
    order: &[ActivityId],
    from: &ActivityId,
    to: &SavepointRef,
) -> Result<Vec<ActivityId>, ModelError> {
    let end = order
        .iter()
        .position(|a| a == from)
        .ok_or_else(|| ModelError::UnknownActivity(from.clone()))?;
    let start = span_start(order, to)?;
    if start > end {
        return Err(ModelError::SavepointNotBefore {
            savepoint: to.to_string(),
            activity: from.clone(),
        });
    }
    chain_from_plan(compensation_plan(process, order, start, end))
}

pub(crate) fn chain_from_plan(plan: Vec<CompensationStep>) -> Result<Vec<ActivityId>, ModelError> {
    let mut chain = Vec::new();
    for step in plan {
        if step.uncompensatable {
            return Err(ModelError::UncompensatableChain(step.target));
        }
        chain.extend(step.compensation);
    }
    Ok(chain)
}
