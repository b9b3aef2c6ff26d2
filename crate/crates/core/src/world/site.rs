use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::SiteId;

/// `app@version`
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PackageKey {
    pub app: String,
    pub version: String,
}

impl PackageKey {
    pub fn new(app: &str, version: &str) -> Self {
        Self {
            app: app.to_owned(),
            version: version.to_owned(),
        }
    }

    /// Parses `app@version`, splitting at the last `@`.
    pub fn parse(s: &str) -> Option<Self> {
        let (app, version) = s.rsplit_once('@')?;
        (!app.is_empty() && !version.is_empty()).then(|| Self::new(app, version))
    }

    pub fn component(&self, id: &str) -> ComponentKey {
        ComponentKey {
            app: self.app.clone(),
            version: self.version.clone(),
            component: id.to_owned(),
        }
    }
}

impl fmt::Display for PackageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.app, self.version)
    }
}

/// Joins keys as `a@1,b@2`.
pub fn join_packages(keys: &[PackageKey]) -> String {
    keys.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn split_packages(s: &str) -> Option<Vec<PackageKey>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(PackageKey::parse).collect()
}

/// One installed component, or one staged file unit, of a package.
/// Serialized as `app@version:component` so it can key JSON maps.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ComponentKey {
    pub app: String,
    pub version: String,
    pub component: String,
}

impl ComponentKey {
    pub fn package(&self) -> PackageKey {
        PackageKey::new(&self.app, &self.version)
    }

    /// Parses `app@version:component`.
    pub fn parse(s: &str) -> Option<Self> {
        let (pkg, component) = s.split_once(':')?;
        let pkg = PackageKey::parse(pkg)?;
        (!component.is_empty()).then(|| pkg.component(component))
    }
}

impl From<ComponentKey> for String {
    fn from(k: ComponentKey) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for ComponentKey {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        Self::parse(&s).ok_or_else(|| format!("malformed component key `{s}`"))
    }
}

impl fmt::Display for ComponentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}:{}", self.app, self.version, self.component)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EffectKind {
    FileStaged,
    FileUnstaged,
    ComponentInstalled,
    ComponentRemoved,
    Activated,
    Deactivated,
}

impl EffectKind {
    pub fn inverse(self) -> EffectKind {
        match self {
            EffectKind::FileStaged => EffectKind::FileUnstaged,
            EffectKind::FileUnstaged => EffectKind::FileStaged,
            EffectKind::ComponentInstalled => EffectKind::ComponentRemoved,
            EffectKind::ComponentRemoved => EffectKind::ComponentInstalled,
            EffectKind::Activated => EffectKind::Deactivated,
            EffectKind::Deactivated => EffectKind::Activated,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EffectKind::FileStaged => "FileStaged",
            EffectKind::FileUnstaged => "FileUnstaged",
            EffectKind::ComponentInstalled => "ComponentInstalled",
            EffectKind::ComponentRemoved => "ComponentRemoved",
            EffectKind::Activated => "Activated",
            EffectKind::Deactivated => "Deactivated",
        }
    }
}

/// One state change on a site. For staging effects `subject.component` is a
/// staged unit name (`component#n`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Effect {
    pub seq: u64,
    pub kind: EffectKind,
    pub subject: ComponentKey,
}

/// A target site. The effect log is the source of truth; `installed` and
/// `staged` are maintained incrementally alongside it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteState {
    pub id: SiteId,
    /// component -> active flag
    pub installed: BTreeMap<ComponentKey, bool>,
    pub staged: BTreeSet<ComponentKey>,
    pub effect_log: Vec<Effect>,
    pub platform_tags: BTreeSet<String>,
    #[serde(skip)]
    next_seq: u64,
}

impl SiteState {
    pub fn new(id: impl Into<SiteId>) -> Self {
        Self {
            id: id.into(),
            installed: BTreeMap::new(),
            staged: BTreeSet::new(),
            effect_log: Vec::new(),
            platform_tags: BTreeSet::new(),
            next_seq: 0,
        }
    }

    pub fn is_installed(&self, c: &ComponentKey) -> bool {
        self.installed.contains_key(c)
    }

    pub fn is_active(&self, c: &ComponentKey) -> bool {
        self.installed.get(c).copied().unwrap_or(false)
    }

    /// Installed versions of `app`.
    pub fn installed_versions(&self, app: &str) -> BTreeSet<&str> {
        self.installed
            .keys()
            .filter(|c| c.app == app)
            .map(|c| c.version.as_str())
            .collect()
    }

    /// Checks whether `kind` can be applied to `subject` in the current state.
    pub fn precondition(&self, kind: EffectKind, subject: &ComponentKey) -> Result<(), String> {
        let ok = match kind {
            EffectKind::FileStaged => !self.staged.contains(subject),
            EffectKind::FileUnstaged => self.staged.contains(subject),
            EffectKind::ComponentInstalled => !self.is_installed(subject),
            EffectKind::ComponentRemoved => self.installed.get(subject) == Some(&false),
            EffectKind::Activated => self.installed.get(subject) == Some(&false),
            EffectKind::Deactivated => self.installed.get(subject) == Some(&true),
        };
        if ok {
            return Ok(());
        }
        Err(match kind {
            EffectKind::FileStaged => format!("{subject} already staged"),
            EffectKind::FileUnstaged => format!("{subject} not staged"),
            EffectKind::ComponentInstalled => format!("{subject} already installed"),
            EffectKind::ComponentRemoved if self.is_active(subject) => format!("{subject} still active"),
            EffectKind::ComponentRemoved | EffectKind::Activated if !self.is_installed(subject) => {
                format!("{subject} not installed")
            }
            EffectKind::Activated => format!("{subject} already active"),
            EffectKind::Deactivated => format!("{subject} not active"),
            _ => format!("cannot apply {} to {subject}", kind.name()),
        })
    }

    /// Appends an effect and updates the derived sets.
    pub fn apply(&mut self, kind: EffectKind, subject: ComponentKey) -> Result<Effect, String> {
        self.precondition(kind, &subject)?;
        self.mutate(kind, &subject);
        let effect = Effect {
            seq: self.next_seq,
            kind,
            subject,
        };
        self.next_seq += 1;
        self.effect_log.push(effect.clone());
        Ok(effect)
    }

    fn mutate(&mut self, kind: EffectKind, subject: &ComponentKey) {
        match kind {
            EffectKind::FileStaged => {
                self.staged.insert(subject.clone());
            }
            EffectKind::FileUnstaged => {
                self.staged.remove(subject);
            }
            EffectKind::ComponentInstalled => {
                self.installed.insert(subject.clone(), false);
            }
            EffectKind::ComponentRemoved => {
                self.installed.remove(subject);
            }
            EffectKind::Activated => {
                self.installed.insert(subject.clone(), true);
            }
            EffectKind::Deactivated => {
                self.installed.insert(subject.clone(), false);
            }
        }
    }

    /// Removes the last logged effect, reverting its state change. Sequence
    /// numbers are never reused.
    pub(crate) fn pop_effect(&mut self) -> Option<Effect> {
        let e = self.effect_log.pop()?;
        self.mutate(e.kind.inverse(), &e.subject);
        Some(e)
    }
}
