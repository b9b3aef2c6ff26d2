use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ids::{ActivityId, PortId};

/// A process definition as read from a file. Nothing here is checked until
/// [`validate`](super::validate) runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessDefinition {
    pub name: String,
    pub activities: Vec<ActivityDef>,
    pub dataflows: Vec<DataflowDef>,
    pub product_types: Vec<ProductTypeDef>,
    pub entry_activity: ActivityId,
    pub multi_site_policy: Option<MultiSitePolicy>,
}

impl ProcessDefinition {
    pub fn new(name: impl Into<String>, entry: impl Into<ActivityId>) -> Self {
        Self {
            name: name.into(),
            activities: Vec::new(),
            dataflows: Vec::new(),
            product_types: Vec::new(),
            entry_activity: entry.into(),
            multi_site_policy: None,
        }
    }

    pub fn activity(&self, id: &str) -> Option<&ActivityDef> {
        self.activities.iter().find(|a| a.id.as_str() == id)
    }

    pub fn product_type(&self, name: &str) -> Option<&ProductTypeDef> {
        self.product_types.iter().find(|t| t.name == name)
    }

    /// The contingency activity bound to `target`, if any.
    pub fn contingency_for(&self, target: &str) -> Option<&ActivityDef> {
        self.activities
            .iter()
            .find(|a| a.contingency_of.as_ref().is_some_and(|t| t.as_str() == target))
    }

    /// The compensation activity bound to `target`, if any.
    pub fn compensation_for(&self, target: &str) -> Option<&ActivityDef> {
        self.activities
            .iter()
            .find(|a| a.compensation_of.as_ref().is_some_and(|t| t.as_str() == target))
    }

    /// Sorts activities by id and product types by name. Dataflows, ports and
    /// children keep their declared order.
    pub fn normalize(&mut self) {
        self.activities.sort_by(|a, b| a.id.cmp(&b.id));
        self.product_types.sort_by(|a, b| a.name.cmp(&b.name));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ActivityKind {
    #[default]
    Simple,
    Composite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Criticality {
    #[default]
    Critical,
    NonCritical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivityDef {
    pub id: ActivityId,
    pub kind: ActivityKind,
    /// Composite only, in execution order.
    pub children: Vec<ActivityId>,
    pub role: Option<String>,
    pub attributes: BTreeMap<String, String>,
    pub criticality: Criticality,
    pub ports: Vec<PortDef>,
    /// Simple only.
    pub action: Option<ActionRef>,
    /// Set when the site is consistent at the end of this activity.
    pub savepoint: Option<SnapshotScope>,
    pub contingency_of: Option<ActivityId>,
    pub compensation_of: Option<ActivityId>,
    pub context_vars: Vec<ContextVarDef>,
}

impl ActivityDef {
    pub fn simple(id: impl Into<ActivityId>, action: ActionKind) -> Self {
        Self {
            id: id.into(),
            kind: ActivityKind::Simple,
            children: Vec::new(),
            role: None,
            attributes: BTreeMap::new(),
            criticality: Criticality::Critical,
            ports: Vec::new(),
            action: Some(ActionRef::from(action)),
            savepoint: None,
            contingency_of: None,
            compensation_of: None,
            context_vars: Vec::new(),
        }
    }

    pub fn composite(id: impl Into<ActivityId>, children: Vec<ActivityId>) -> Self {
        Self {
            kind: ActivityKind::Composite,
            children,
            action: None,
            ..Self::simple(id, ActionKind::Search)
        }
    }

    /// Contingency and compensation activities are recovery activities; they
    /// never appear in the forward execution order.
    pub fn is_recovery(&self) -> bool {
        self.contingency_of.is_some() || self.compensation_of.is_some()
    }

    pub fn is_critical(&self) -> bool {
        self.criticality == Criticality::Critical
    }

    pub fn port(&self, id: &str) -> Option<&PortDef> {
        self.ports.iter().find(|p| p.id.as_str() == id)
    }

    pub fn ko_port(&self) -> Option<&PortDef> {
        self.ports
            .iter()
            .find(|p| p.direction == Direction::Out && p.channel == Channel::Ko)
    }

    pub fn action_kind(&self) -> Option<ActionKind> {
        self.action.as_ref().and_then(ActionRef::kind)
    }

    pub fn context_var(&self, name: &str) -> Option<&ContextVarDef> {
        self.context_vars.iter().find(|v| v.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    In,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Ok,
    Ko,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PortDef {
    pub id: PortId,
    pub direction: Direction,
    pub channel: Channel,
    pub product_type: String,
}

impl PortDef {
    pub fn new(id: impl Into<PortId>, direction: Direction, channel: Channel, ty: &str) -> Self {
        Self {
            id: id.into(),
            direction,
            channel,
            product_type: ty.to_owned(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScalarKind {
    Text,
    Integer,
    Fraction,
    BinaryRef,
}

impl ScalarKind {
    pub const ALL: [ScalarKind; 4] = [
        ScalarKind::Text,
        ScalarKind::Integer,
        ScalarKind::Fraction,
        ScalarKind::BinaryRef,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            ScalarKind::Text => "text",
            ScalarKind::Integer => "integer",
            ScalarKind::Fraction => "fraction",
            ScalarKind::BinaryRef => "binary-ref",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.keyword() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductTypeDef {
    pub name: String,
    pub fields: BTreeMap<String, ScalarKind>,
}

/// A scalar carried by a product field or an activity context variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Text(String),
    Integer(i64),
    Fraction(f64),
    BinaryRef(String),
}

impl Value {
    pub fn kind(&self) -> ScalarKind {
        match self {
            Value::Text(_) => ScalarKind::Text,
            Value::Integer(_) => ScalarKind::Integer,
            Value::Fraction(_) => ScalarKind::Fraction,
            Value::BinaryRef(_) => ScalarKind::BinaryRef,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) | Value::BinaryRef(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_fraction(&self) -> Option<f64> {
        match self {
            Value::Fraction(f) => Some(*f),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) | Value::BinaryRef(s) => f.write_str(s),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Fraction(x) => write!(f, "{x:.2}"),
        }
    }
}

/// Typed data exchanged between activities through ports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Product {
    #[serde(rename = "type")]
    pub type_name: String,
    pub values: BTreeMap<String, Value>,
}

impl Product {
    pub fn new(type_name: &str) -> Self {
        Self {
            type_name: type_name.to_owned(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: &str, value: Value) -> Self {
        self.values.insert(field.to_owned(), value);
        self
    }

    pub fn text(&self, field: &str) -> Option<&str> {
        self.values.get(field).and_then(Value::as_text)
    }

    /// Checks the product against its declared type: every field present,
    /// no extra fields, kinds match.
    pub fn conforms_to(&self, ty: &ProductTypeDef) -> Result<(), String> {
        if self.type_name != ty.name {
            return Err(format!("product of type {} used as {}", self.type_name, ty.name));
        }
        for (field, kind) in &ty.fields {
            match self.values.get(field) {
                None => return Err(format!("missing field {field}")),
                Some(v) if v.kind() != *kind => {
                    return Err(format!(
                        "field {field} is {}, expected {}",
                        v.kind().keyword(),
                        kind.keyword()
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.values.keys().find(|k| !ty.fields.contains_key(*k)) {
            return Err(format!("unexpected field {extra}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub activity: ActivityId,
    pub port: PortId,
}

impl Endpoint {
    pub fn new(activity: impl Into<ActivityId>, port: impl Into<PortId>) -> Self {
        Self {
            activity: activity.into(),
            port: port.into(),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.activity, self.port)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataflowDef {
    pub from: Endpoint,
    pub to: Endpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum SnapshotScope {
    #[default]
    SiteState,
    SiteStateAndProducts,
}

impl SnapshotScope {
    pub fn keyword(self) -> &'static str {
        match self {
            SnapshotScope::SiteState => "site-state",
            SnapshotScope::SiteStateAndProducts => "site-state-and-products",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        match s {
            "site-state" => Some(SnapshotScope::SiteState),
            "site-state-and-products" => Some(SnapshotScope::SiteStateAndProducts),
            _ => None,
        }
    }
}

/// Where backward recovery returns to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SavepointAt {
    /// Implicit savepoint taken before the first activity runs.
    ProcessStart,
    /// Taken at the end of the named activity.
    Activity(ActivityId),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SavepointRef {
    pub at: SavepointAt,
    pub scope: SnapshotScope,
}

impl SavepointRef {
    pub fn process_start() -> Self {
        Self {
            at: SavepointAt::ProcessStart,
            scope: SnapshotScope::SiteStateAndProducts,
        }
    }

    pub fn at_activity(id: impl Into<ActivityId>, scope: SnapshotScope) -> Self {
        Self {
            at: SavepointAt::Activity(id.into()),
            scope,
        }
    }

    pub fn activity(&self) -> Option<&ActivityId> {
        match &self.at {
            SavepointAt::ProcessStart => None,
            SavepointAt::Activity(id) => Some(id),
        }
    }

    pub fn is_process_start(&self) -> bool {
        self.at == SavepointAt::ProcessStart
    }
}

impl fmt::Display for SavepointRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.at {
            SavepointAt::ProcessStart => f.write_str("process-start"),
            SavepointAt::Activity(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    Fraction,
    Integer,
    Text,
}

impl VarKind {
    pub fn keyword(self) -> &'static str {
        match self {
            VarKind::Fraction => "fraction",
            VarKind::Integer => "integer",
            VarKind::Text => "text",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        match s {
            "fraction" => Some(VarKind::Fraction),
            "integer" => Some(VarKind::Integer),
            "text" => Some(VarKind::Text),
            _ => None,
        }
    }

    pub fn initial(self) -> Value {
        match self {
            VarKind::Fraction => Value::Fraction(0.0),
            VarKind::Integer => Value::Integer(0),
            VarKind::Text => Value::Text(String::new()),
        }
    }

    pub fn accepts(self, v: &Value) -> bool {
        match (self, v) {
            (VarKind::Fraction, Value::Fraction(f)) => (0.0..=1.0).contains(f),
            (VarKind::Integer, Value::Integer(_)) => true,
            (VarKind::Text, Value::Text(_)) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextVarDef {
    pub name: String,
    pub kind: VarKind,
    pub updated_by: ActionRef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MultiSiteMode {
    AllOrNothing,
    BestEffort,
}

impl MultiSiteMode {
    pub fn keyword(self) -> &'static str {
        match self {
            MultiSiteMode::AllOrNothing => "all-or-nothing",
            MultiSiteMode::BestEffort => "best-effort",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        match s {
            "all-or-nothing" => Some(MultiSiteMode::AllOrNothing),
            "best-effort" => Some(MultiSiteMode::BestEffort),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiSitePolicy {
    pub mode: MultiSiteMode,
    /// Present iff `mode` is best-effort.
    pub min_success_fraction: Option<f64>,
    pub retry_list_output: bool,
}

impl MultiSitePolicy {
    pub fn all_or_nothing() -> Self {
        Self {
            mode: MultiSiteMode::AllOrNothing,
            min_success_fraction: None,
            retry_list_output: false,
        }
    }

    pub fn best_effort(min_success_fraction: f64) -> Self {
        Self {
            mode: MultiSiteMode::BestEffort,
            min_success_fraction: Some(min_success_fraction),
            retry_list_output: true,
        }
    }
}

/// The deployment operations a simple activity can perform against a world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Search,
    Resolve,
    Transfer,
    Install,
    Uninstall,
    Activate,
    Deactivate,
    Unstage,
}

impl ActionKind {
    pub const ALL: [ActionKind; 8] = [
        ActionKind::Search,
        ActionKind::Resolve,
        ActionKind::Transfer,
        ActionKind::Install,
        ActionKind::Uninstall,
        ActionKind::Activate,
        ActionKind::Deactivate,
        ActionKind::Unstage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Search => "search",
            ActionKind::Resolve => "resolve",
            ActionKind::Transfer => "transfer",
            ActionKind::Install => "install",
            ActionKind::Uninstall => "uninstall",
            ActionKind::Activate => "activate",
            ActionKind::Deactivate => "deactivate",
            ActionKind::Unstage => "unstage",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the action can append effects to a site.
    pub fn is_effectful(self) -> bool {
        !matches!(self, ActionKind::Search | ActionKind::Resolve)
    }
}

/// Name of the world operation an activity performs. Unknown names survive
/// parsing and are rejected by validation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionRef(pub String);

impl ActionRef {
    pub fn kind(&self) -> Option<ActionKind> {
        ActionKind::from_name(&self.0)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<ActionKind> for ActionRef {
    fn from(k: ActionKind) -> Self {
        ActionRef(k.name().to_owned())
    }
}

impl fmt::Display for ActionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
