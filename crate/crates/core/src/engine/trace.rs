//! Trace events, the trace file format, and the status-legality check.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ActivityStatus;
use crate::ids::ActivityId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TraceKind {
    Started,
    Finished,
    ExceptionRaised,
    RoutedToKO,
    DecisionMade,
    SavepointTaken,
    CompensationRun,
    ContingencyRun,
    SiteEffect,
}

/// One line of a trace. Field order is fixed by declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub clock: u64,
    pub kind: TraceKind,
    pub activity: Option<ActivityId>,
    pub payload: BTreeMap<String, String>,
}

impl TraceEvent {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.payload.get(key).map(String::as_str)
    }

    /// The `(from, to)` status change this event records, if any.
    pub fn transition(&self) -> Option<Result<(ActivityStatus, ActivityStatus), String>> {
        let t = self.get("transition")?;
        Some(parse_transition(t))
    }
}

fn parse_transition(t: &str) -> Result<(ActivityStatus, ActivityStatus), String> {
    let (a, b) = t.split_once('>').ok_or_else(|| format!("malformed transition `{t}`"))?;
    let from = ActivityStatus::from_name(a).ok_or_else(|| format!("unknown status `{a}`"))?;
    let to = ActivityStatus::from_name(b).ok_or_else(|| format!("unknown status `{b}`"))?;
    Ok((from, to))
}

/// Marks the start of one site's run in a multi-site trace file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub site: String,
    pub process: String,
    pub seed: u64,
}

/// Any line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceRecord {
    Run { run: RunHeader },
    Report { report: serde_json::Value },
    Event(TraceEvent),
}

impl TraceRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for TraceParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for TraceParseError {}

/// Parses a trace file, one JSON record per non-empty line.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TraceParseError {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Checks every recorded transition against the legal set, and that each
/// starts from the status the activity was last seen in. A process-level
/// `Started` event begins a new run.
pub fn check_transitions<'a>(events: impl IntoIterator<Item = &'a TraceEvent>) -> Result<usize, String> {
    let mut current: BTreeMap<&ActivityId, ActivityStatus> = BTreeMap::new();
    let mut checked = 0;
    for e in events {
        if e.kind == TraceKind::Started && e.activity.is_none() {
            current.clear();
            continue;
        }
        let Some(t) = e.transition() else { continue };
        let (from, to) = t.map_err(|m| format!("clock {}: {m}", e.clock))?;
        let Some(a) = &e.activity else {
            return Err(format!("clock {}: transition without an activity", e.clock));
        };
        if !ActivityStatus::is_legal(from, to) {
            return Err(format!("clock {}: illegal transition {from:?}>{to:?} on {a}", e.clock));
        }
        let seen = current.get(a).copied().unwrap_or(ActivityStatus::Pending);
        if seen != from {
            return Err(format!("clock {}: {a} moves from {from:?} but was {seen:?}", e.clock));
        }
        current.insert(a, to);
        checked += 1;
    }
    Ok(checked)
}
