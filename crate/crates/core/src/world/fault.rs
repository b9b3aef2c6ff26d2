//! Scripted fault injection. Triggers depend only on the engine's logical
//! clock and on action progress.

use std::fmt;

use crate::ids::{ServerId, SiteId};
use crate::model::ActionKind;

#[derive(Clone, Debug, PartialEq)]
pub enum Trigger {
    /// First action step at or after this logical clock.
    AtClock(u64),
    /// Start of the `occurrence`-th matching action (1-based).
    DuringAction {
        action: ActionKind,
        target: Option<String>,
        occurrence: u32,
    },
    /// First step at which the action's progress reaches `fraction`.
    AfterFraction {
        action: ActionKind,
        fraction: f64,
        target: Option<String>,
    },
}

impl Trigger {
    pub fn target(&self) -> Option<&str> {
        match self {
            Trigger::AtClock(_) => None,
            Trigger::DuringAction { target, .. } | Trigger::AfterFraction { target, .. } => target.as_deref(),
        }
    }
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trigger::AtClock(c) => write!(f, "at-clock {c}"),
            Trigger::DuringAction { action, target, occurrence } => {
                write!(f, "during-action {}", action.name())?;
                if let Some(t) = target {
                    write!(f, " on {t}")?;
                }
                if *occurrence != 1 {
                    write!(f, " occurrence {occurrence}")?;
                }
                Ok(())
            }
            Trigger::AfterFraction { action, fraction, target } => {
                write!(f, "after-fraction {} {fraction}", action.name())?;
                if let Some(t) = target {
                    write!(f, " on {t}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fault {
    ServerDown(ServerId),
    LinkDown(SiteId),
    ActionError(String),
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::ServerDown(s) => write!(f, "server-down {s}"),
            Fault::LinkDown(s) => write!(f, "link-down {s}"),
            Fault::ActionError(d) => write!(f, "action-error {d:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultEntry {
    pub trigger: Trigger,
    pub fault: Fault,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaultScript {
    pub entries: Vec<FaultEntry>,
}

impl FaultScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, trigger: Trigger, fault: Fault) -> Self {
        self.entries.push(FaultEntry { trigger, fault });
        self
    }
}

/// Where an action step is, as seen by the trigger evaluator.
#[derive(Clone, Debug)]
pub(crate) struct StepCtx<'a> {
    pub action: ActionKind,
    pub site: &'a SiteId,
    pub server: Option<&'a ServerId>,
    pub clock: u64,
    pub progress: f64,
    pub at_start: bool,
}

impl StepCtx<'_> {
    fn targets(&self, target: &Option<String>) -> bool {
        match target {
            None => true,
            Some(t) => self.site.as_str() == t || self.server.is_some_and(|s| s.as_str() == t),
        }
    }
}

/// Runtime state of a script: which entries fired, how many matching starts
/// each during-action entry has seen.
#[derive(Clone, Debug, Default)]
pub(crate) struct FaultState {
    pub fired: Vec<bool>,
    pub seen: Vec<u32>,
}

impl FaultState {
    pub fn new(script: &FaultScript) -> Self {
        Self {
            fired: vec![false; script.entries.len()],
            seen: vec![0; script.entries.len()],
        }
    }

    /// Indices of entries that fire at this step. Each entry fires once.
    pub fn due(&mut self, script: &FaultScript, ctx: &StepCtx<'_>) -> Vec<usize> {
        let mut due = Vec::new();
        for (i, entry) in script.entries.iter().enumerate() {
            if self.fired[i] {
                continue;
            }
            let fire = match &entry.trigger {
                Trigger::AtClock(c) => ctx.clock >= *c,
                Trigger::DuringAction { action, target, occurrence } => {
                    if ctx.at_start && *action == ctx.action && ctx.targets(target) {
                        self.seen[i] += 1;
                        self.seen[i] == *occurrence
                    } else {
                        false
                    }
                }
                Trigger::AfterFraction { action, fraction, target } => {
                    *action == ctx.action && ctx.targets(target) && ctx.progress >= *fraction
                }
            };
            if fire {
                self.fired[i] = true;
                due.push(i);
            }
        }
        due
    }
}
