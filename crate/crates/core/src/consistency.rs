//! Post-run verdicts: success (is the deployed package complete?) and safety
//! (did anything else on the site change?).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::engine::Outcome;
use crate::ids::SiteId;
use crate::world::{ComponentKey, Effect, EffectKind, PackageDescriptor, PackageKey, SiteState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Success {
    No,
    Partial,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Safety {
    Preserved,
    Violated,
}

/// Site contents rebuilt from an effect log alone.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Replayed {
    pub installed: BTreeMap<ComponentKey, bool>,
    pub staged: BTreeSet<ComponentKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("effect at index {index} has seq {seq}, not above the previous {prev}")]
    NonMonotonic { index: usize, prev: u64, seq: u64 },
    #[error("effect seq {seq} ({kind:?} {subject}) does not apply to the replayed state")]
    Inapplicable {
        seq: u64,
        kind: EffectKind,
        subject: ComponentKey,
    },
}

/// Folds `log` from an empty site. Independent of [`SiteState`]'s own
/// bookkeeping so the two can be compared.
pub fn replay_oracle(log: &[Effect]) -> Result<Replayed, ReplayError> {
    let mut r = Replayed::default();
    let mut prev: Option<u64> = None;
    for (index, e) in log.iter().enumerate() {
        if let Some(p) = prev {
            if e.seq <= p {
                return Err(ReplayError::NonMonotonic { index, prev: p, seq: e.seq });
            }
        }
        prev = Some(e.seq);
        let s = &e.subject;
        let ok = match e.kind {
            EffectKind::FileStaged => r.staged.insert(s.clone()),
            EffectKind::FileUnstaged => r.staged.remove(s),
            EffectKind::ComponentInstalled => r.installed.insert(s.clone(), false).is_none(),
            EffectKind::ComponentRemoved => r.installed.remove(s) == Some(false),
            EffectKind::Activated => r.installed.get_mut(s).is_some_and(|a| !std::mem::replace(a, true)),
            EffectKind::Deactivated => r.installed.get_mut(s).is_some_and(|a| std::mem::replace(a, false)),
        };
        if !ok {
            return Err(ReplayError::Inapplicable {
                seq: e.seq,
                kind: e.kind,
                subject: s.clone(),
            });
        }
    }
    Ok(r)
}

/// Full when every component of `package` is installed on `post`, Partial
/// when only optional ones are missing, No otherwise.
pub fn check_success(post: &SiteState, package: &PackageDescriptor) -> (Success, Vec<String>) {
    let key = package.key();
    let mut missing_mandatory = Vec::new();
    let mut missing_optional = Vec::new();
    for c in &package.components {
        if !post.is_installed(&key.component(&c.id)) {
            let line = format!("missing {} component {}", if c.mandatory { "mandatory" } else { "optional" }, key.component(&c.id));
            if c.mandatory {
                missing_mandatory.push(line);
            } else {
                missing_optional.push(line);
            }
        }
    }
    let verdict = if !missing_mandatory.is_empty() {
        Success::No
    } else if !missing_optional.is_empty() {
        Success::Partial
    } else {
        Success::Full
    };
    missing_mandatory.extend(missing_optional);
    (verdict, missing_mandatory)
}

/// Compares everything installed on the site that does not belong to the
/// run: the deployed package and the dependencies of `closure` the run
/// brought in are excluded. Active flags count.
pub fn check_safety(pre: &SiteState, post: &SiteState, deployed: &PackageKey, closure: &[PackageKey]) -> (Safety, Vec<String>) {
    let pre_packages: BTreeSet<PackageKey> = pre.installed.keys().map(ComponentKey::package).collect();
    let mut owned: BTreeSet<PackageKey> = closure.iter().filter(|p| !pre_packages.contains(*p)).cloned().collect();
    owned.insert(deployed.clone());
    let foreign = |s: &SiteState| -> BTreeMap<ComponentKey, bool> {
        s.installed
            .iter()
            .filter(|(c, _)| !owned.contains(&c.package()))
            .map(|(c, a)| (c.clone(), *a))
            .collect()
    };
    let (before, after) = (foreign(pre), foreign(post));
    let mut evidence = Vec::new();
    for (c, a) in &before {
        match after.get(c) {
            None => evidence.push(format!("foreign component {c} removed")),
            Some(b) if b != a => evidence.push(format!(
                "foreign component {c} left {}",
                if *b { "active" } else { "inactive" }
            )),
            _ => {}
        }
    }
    for c in after.keys().filter(|c| !before.contains_key(*c)) {
        evidence.push(format!("foreign component {c} added"));
    }
    let verdict = if evidence.is_empty() { Safety::Preserved } else { Safety::Violated };
    (verdict, evidence)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub run_id: String,
    pub site: SiteId,
    pub outcome: Outcome,
    pub success: Success,
    pub safety: Safety,
    pub evidence: Vec<String>,
}

impl ConsistencyReport {
    /// Builds the report for one site. A FailedUnsafe outcome means some
    /// effects could not be compensated, so safety is reported Violated even
    /// when the foreign set happens to match.
    pub fn build(
        run_id: &str,
        outcome: Outcome,
        pre: &SiteState,
        post: &SiteState,
        package: Option<&PackageDescriptor>,
        closure: &[PackageKey],
    ) -> Self {
        let mut evidence = Vec::new();
        let success = match package {
            Some(p) => {
                let (s, ev) = check_success(post, p);
                evidence.extend(ev);
                s
            }
            None => Success::No,
        };
        let key = package.map(PackageDescriptor::key).unwrap_or_else(|| PackageKey::new("", ""));
        let (mut safety, ev) = check_safety(pre, post, &key, closure);
        evidence.extend(ev);
        if outcome == Outcome::FailedUnsafe {
            safety = Safety::Violated;
            let last = pre.effect_log.last().map(|e| e.seq);
            let logged = post.effect_log.iter().filter(|e| last.is_none_or(|l| e.seq > l)).count();
            evidence.push(format!(
                "uncompensated effects: recovery did not reach its snapshot ({logged} effects logged since process start)"
            ));
        }
        Self {
            run_id: run_id.to_owned(),
            site: post.id.clone(),
            outcome,
            success,
            safety,
            evidence,
        }
    }

    /// Whether the verdicts agree with what the engine concluded.
    pub fn agrees_with_outcome(&self) -> bool {
        match self.outcome {
            Outcome::SucceededFull => self.success == Success::Full,
            Outcome::SucceededPartial => self.success == Success::Partial,
            Outcome::FailedSafe => self.safety == Safety::Preserved,
            Outcome::FailedUnsafe => self.safety == Safety::Violated,
            Outcome::Running => false,
        }
    }
}

/// Human-readable table, one row per site, evidence underneath.
pub fn render_table(reports: &[ConsistencyReport]) -> String {
    let w = reports.iter().map(|r| r.site.as_str().len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<w$}  {:<16}  {:<8}  {}\n", "site", "outcome", "success", "safety");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<w$}  {:<16}  {:<8}  {}",
            r.site.as_str(),
            format!("{:?}", r.outcome),
            format!("{:?}", r.success),
            format!("{:?}", r.safety)
        );
        for e in &r.evidence {
            let _ = writeln!(out, "{:<w$}    - {e}", "");
        }
    }
    out
}

/// One JSON object per line.
pub fn render_records(reports: &[ConsistencyReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
        .collect()
}
