use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::site::PackageKey;
use crate::ids::ServerId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub id: String,
    pub mandatory: bool,
    pub size_units: u32,
}

impl ComponentSpec {
    /// Staged unit names for this component: `id#0 .. id#(size-1)`.
    pub fn units(&self) -> impl Iterator<Item = String> + '_ {
        (0..self.size_units).map(move |i| format!("{}#{i}", self.id))
    }
}

/// Exact and minimum-version constraints only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VersionConstraint {
    Exact(String),
    AtLeast(String),
}

impl VersionConstraint {
    /// Parses `=1.0` or `>=2.0`.
    pub fn parse(s: &str) -> Option<Self> {
        if let Some(v) = s.strip_prefix(">=") {
            (!v.is_empty()).then(|| VersionConstraint::AtLeast(v.to_owned()))
        } else if let Some(v) = s.strip_prefix('=') {
            (!v.is_empty()).then(|| VersionConstraint::Exact(v.to_owned()))
        } else {
            None
        }
    }

    pub fn satisfied_by(&self, version: &str) -> bool {
        match self {
            VersionConstraint::Exact(v) => compare_versions(version, v) == Ordering::Equal,
            VersionConstraint::AtLeast(v) => compare_versions(version, v) != Ordering::Less,
        }
    }
}

impl fmt::Display for VersionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionConstraint::Exact(v) => write!(f, "={v}"),
            VersionConstraint::AtLeast(v) => write!(f, ">={v}"),
        }
    }
}

/// Dotted version comparison: numeric parts compare numerically, others
/// lexically; missing trailing parts count as zero.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let pa: Vec<&str> = a.split('.').collect();
    let pb: Vec<&str> = b.split('.').collect();
    for i in 0..pa.len().max(pb.len()) {
        let x = pa.get(i).copied().unwrap_or("0");
        let y = pb.get(i).copied().unwrap_or("0");
        let ord = match (x.parse::<u64>(), y.parse::<u64>()) {
            (Ok(m), Ok(n)) => m.cmp(&n),
            _ => x.cmp(y),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub app: String,
    pub constraint: VersionConstraint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageDescriptor {
    pub app_name: String,
    pub version: String,
    pub components: Vec<ComponentSpec>,
    pub depends_on: Vec<Dependency>,
    /// Platform tags a site must carry for the package to install.
    pub requires_tags: BTreeSet<String>,
}

impl PackageDescriptor {
    pub fn new(app: &str, version: &str) -> Self {
        Self {
            app_name: app.to_owned(),
            version: version.to_owned(),
            components: Vec::new(),
            depends_on: Vec::new(),
            requires_tags: BTreeSet::new(),
        }
    }

    pub fn with_component(mut self, id: &str, mandatory: bool, size_units: u32) -> Self {
        self.components.push(ComponentSpec {
            id: id.to_owned(),
            mandatory,
            size_units,
        });
        self
    }

    pub fn depending_on(mut self, app: &str, constraint: VersionConstraint) -> Self {
        self.depends_on.push(Dependency {
            app: app.to_owned(),
            constraint,
        });
        self
    }

    pub fn key(&self) -> PackageKey {
        PackageKey::new(&self.app_name, &self.version)
    }

    pub fn total_units(&self) -> u64 {
        self.components.iter().map(|c| u64::from(c.size_units)).sum()
    }

    pub fn component(&self, id: &str) -> Option<&ComponentSpec> {
        self.components.iter().find(|c| c.id == id)
    }

    /// Descriptor invariants: at least one mandatory component, unique
    /// component ids, non-empty sizes.
    pub fn check(&self) -> Result<(), String> {
        if !self.components.iter().any(|c| c.mandatory) {
            return Err(format!("{} has no mandatory component", self.key()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.components {
            if !seen.insert(&c.id) {
                return Err(format!("{} declares component {} twice", self.key(), c.id));
            }
            if c.size_units == 0 {
                return Err(format!("{}:{} has size 0", self.key(), c.id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Server {
    pub id: ServerId,
    pub hosted: Vec<PackageDescriptor>,
    pub up: bool,
}

impl Server {
    pub fn new(id: impl Into<ServerId>) -> Self {
        Self {
            id: id.into(),
            hosted: Vec::new(),
            up: true,
        }
    }

    pub fn hosting(mut self, pkg: PackageDescriptor) -> Self {
        self.hosted.push(pkg);
        self
    }

    pub fn hosts(&self, key: &PackageKey) -> bool {
        self.hosted
            .iter()
            .any(|p| p.app_name == key.app && p.version == key.version)
    }
}
