use std::collections::BTreeMap;

use super::diag::Diags;
use super::syntax::{Node, Word};
use crate::ids::{ActivityId, PortId};
use crate::model::*;

type At = (usize, usize, usize);

/// Tracks which single-valued keys a block has already set.
#[derive(Default)]
pub(crate) struct Seen(BTreeMap<String, At>);

impl Seen {
    /// False (and an error) when `node`'s key was already set in this block.
    pub(crate) fn first(&mut self, node: &Node, d: &mut Diags) -> bool {
        let key = node.keyword().to_owned();
        if let Some(prev) = self.0.get(&key) {
            d.error(
                node.head().at(),
                format!("duplicate key `{key}` (first set at line {})", prev.0),
            );
            return false;
        }
        self.0.insert(key, node.head().at());
        true
    }
}

/// Returns the arguments when the statement has exactly `n` of them and no
/// block.
pub(crate) fn args<'a>(node: &'a Node, n: usize, usage: &str, d: &mut Diags) -> Option<&'a [Word]> {
    if node.body.is_some() {
        d.error(node.head().at(), format!("`{}` does not take a block", node.keyword()));
        return None;
    }
    let a = node.args();
    if a.len() != n {
        let at = a.get(n).map(Word::at).unwrap_or(node.head().at());
        d.error(at, format!("expected: {usage}"));
        return None;
    }
    Some(a)
}

/// Returns the block body and header arguments when the statement opens a
/// block with exactly `n` header arguments.
pub(crate) fn block<'a>(node: &'a Node, n: usize, usage: &str, d: &mut Diags) -> Option<(&'a [Word], &'a [Node])> {
    let Some(body) = &node.body else {
        d.error(node.head().at(), format!("`{}` needs a block: {usage}", node.keyword()));
        return None;
    };
    let a = node.args();
    if a.len() != n {
        let at = a.get(n).map(Word::at).unwrap_or(node.head().at());
        d.error(at, format!("expected: {usage}"));
        return None;
    }
    Some((a, body))
}

pub(crate) fn unknown_key(node: &Node, d: &mut Diags) {
    d.warning(node.head().at(), format!("unknown key `{}` ignored", node.keyword()));
}

pub(crate) fn fraction(w: &Word, d: &mut Diags) -> Option<f64> {
    match w.text.parse::<f64>() {
        Ok(f) if f.is_finite() && !w.quoted => Some(f),
        _ => {
            d.error(w.at(), format!("expected a number, found `{}`", w.text));
            None
        }
    }
}

pub(crate) fn boolean(w: &Word, d: &mut Diags) -> Option<bool> {
    match w.text.as_str() {
        "true" => Some(true),
        "false" => Some(false),
        other => {
            d.error(w.at(), format!("expected true or false, found `{other}`"));
            None
        }
    }
}

pub(crate) fn keyword<T>(w: &Word, what: &str, choices: &str, f: impl Fn(&str) -> Option<T>, d: &mut Diags) -> Option<T> {
    let v = f(&w.text);
    if v.is_none() {
        d.error(w.at(), format!("unknown {what} `{}` (expected {choices})", w.text));
    }
    v
}

/// Interprets a parsed tree as a process definition. Returns `None` when an
/// error was reported.
pub(crate) fn read_process(tree: &[Node], d: &mut Diags) -> Option<ProcessDefinition> {
    let Some(first) = tree.first() else {
        d.error((1, 1, 0), "expected process header");
        return None;
    };
    if first.keyword() != "process" || first.body.is_none() {
        d.error(first.head().at(), "expected process header");
        return None;
    }
    for extra in &tree[1..] {
        d.error(extra.head().at(), "unexpected statement after the process block");
    }
    let (header, body) = block(first, 1, "process <name> {", d)?;

    let mut p = ProcessDefinition::new(header[0].text.clone(), "");
    let mut seen = Seen::default();
    let mut entry = None;
    for node in body {
        match node.keyword() {
            "entry" => {
                if seen.first(node, d) {
                    if let Some(a) = args(node, 1, "entry <activity>", d) {
                        entry = Some(ActivityId::new(a[0].text.clone()));
                    }
                }
            }
            "policy" => {
                if seen.first(node, d) {
                    if let Some((_, b)) = block(node, 0, "policy {", d) {
                        p.multi_site_policy = read_policy(node, b, d);
                    }
                }
            }
            "product-type" => {
                if let Some((a, b)) = block(node, 1, "product-type <name> {", d) {
                    p.product_types.push(read_product_type(&a[0], b, d));
                }
            }
            "activity" => {
                if let Some((a, b)) = block(node, 1, "activity <id> {", d) {
                    p.activities.push(read_activity(&a[0], b, d));
                }
            }
            "flow" => {
                if let Some(a) = args(node, 3, "flow <activity>.<port> -> <activity>.<port>", d) {
                    if a[1].text != "->" {
                        d.error(a[1].at(), "expected `->`");
                        continue;
                    }
                    if let (Some(from), Some(to)) = (endpoint(&a[0], d), endpoint(&a[2], d)) {
                        p.dataflows.push(DataflowDef { from, to });
                    }
                }
            }
            _ => unknown_key(node, d),
        }
    }
    match entry {
        Some(e) => p.entry_activity = e,
        None => d.error(first.head().at(), "missing `entry`"),
    }
    (!d.has_errors()).then_some(p)
}

fn endpoint(w: &Word, d: &mut Diags) -> Option<Endpoint> {
    match w.text.split_once('.') {
        Some((a, port)) if !a.is_empty() && !port.is_empty() => Some(Endpoint::new(a, port)),
        _ => {
            d.error(w.at(), format!("expected <activity>.<port>, found `{}`", w.text));
            None
        }
    }
}

fn read_policy(node: &Node, body: &[Node], d: &mut Diags) -> Option<MultiSitePolicy> {
    let mut seen = Seen::default();
    let mut mode = None;
    let mut min = None;
    let mut retry = false;
    for n in body {
        match n.keyword() {
            "mode" if seen.first(n, d) => {
                if let Some(a) = args(n, 1, "mode all-or-nothing|best-effort", d) {
                    mode = keyword(&a[0], "mode", "all-or-nothing or best-effort", MultiSiteMode::from_keyword, d);
                }
            }
            "min-success-fraction" if seen.first(n, d) => {
                if let Some(a) = args(n, 1, "min-success-fraction <fraction>", d) {
                    min = fraction(&a[0], d);
                }
            }
            "retry-list" if seen.first(n, d) => {
                if let Some(a) = args(n, 1, "retry-list true|false", d) {
                    retry = boolean(&a[0], d).unwrap_or(false);
                }
            }
            "mode" | "min-success-fraction" | "retry-list" => {}
            _ => unknown_key(n, d),
        }
    }
    if mode.is_none() && !d.has_errors() {
        d.error(node.head().at(), "policy needs a `mode`");
    }
    Some(MultiSitePolicy {
        mode: mode?,
        min_success_fraction: min,
        retry_list_output: retry,
    })
}

fn read_product_type(name: &Word, body: &[Node], d: &mut Diags) -> ProductTypeDef {
    let mut fields = BTreeMap::new();
    for n in body {
        let Some(a) = args(n, 1, "<field> text|integer|fraction|binary-ref", d) else {
            continue;
        };
        let Some(kind) = keyword(&a[0], "field kind", "text, integer, fraction or binary-ref", ScalarKind::from_keyword, d) else {
            continue;
        };
        if fields.insert(n.keyword().to_owned(), kind).is_some() {
            d.error(n.head().at(), format!("duplicate field `{}`", n.keyword()));
        }
    }
    ProductTypeDef {
        name: name.text.clone(),
        fields,
    }
}

fn read_activity(id: &Word, body: &[Node], d: &mut Diags) -> ActivityDef {
    let mut act = ActivityDef::simple(id.text.as_str(), ActionKind::Search);
    act.action = None;
    let mut seen = Seen::default();
    for n in body {
        let key = n.keyword();
        let single = matches!(
            key,
            "kind" | "role" | "criticality" | "action" | "children" | "savepoint" | "contingency-of" | "compensation-of"
        );
        if single && !seen.first(n, d) {
            continue;
        }
        match key {
            "kind" => {
                if let Some(a) = args(n, 1, "kind simple|composite", d) {
                    act.kind = keyword(&a[0], "kind", "simple or composite", |s| match s {
                        "simple" => Some(ActivityKind::Simple),
                        "composite" => Some(ActivityKind::Composite),
                        _ => None,
                    }, d)
                    .unwrap_or_default();
                }
            }
            "role" => {
                if let Some(a) = args(n, 1, "role <name>", d) {
                    act.role = Some(a[0].text.clone());
                }
            }
            "criticality" => {
                if let Some(a) = args(n, 1, "criticality critical|non-critical", d) {
                    act.criticality = keyword(&a[0], "criticality", "critical or non-critical", |s| match s {
                        "critical" => Some(Criticality::Critical),
                        "non-critical" => Some(Criticality::NonCritical),
                        _ => None,
                    }, d)
                    .unwrap_or_default();
                }
            }
            "action" => {
                if let Some(a) = args(n, 1, "action <name>", d) {
                    act.action = Some(ActionRef(a[0].text.clone()));
                }
            }
            "children" => {
                if n.body.is_some() || n.args().is_empty() {
                    d.error(n.head().at(), "expected: children <activity> ...");
                } else {
                    act.children = n.args().iter().map(|w| ActivityId::new(w.text.clone())).collect();
                }
            }
            "savepoint" => {
                if let Some(a) = args(n, 1, "savepoint site-state|site-state-and-products", d) {
                    act.savepoint = keyword(&a[0], "snapshot scope", "site-state or site-state-and-products", SnapshotScope::from_keyword, d);
                }
            }
            "contingency-of" => {
                if let Some(a) = args(n, 1, "contingency-of <activity>", d) {
                    act.contingency_of = Some(ActivityId::new(a[0].text.clone()));
                }
            }
            "compensation-of" => {
                if let Some(a) = args(n, 1, "compensation-of <activity>", d) {
                    act.compensation_of = Some(ActivityId::new(a[0].text.clone()));
                }
            }
            "attribute" => {
                if let Some(a) = args(n, 2, "attribute <key> <value>", d) {
                    if act.attributes.insert(a[0].text.clone(), a[1].text.clone()).is_some() {
                        d.error(a[0].at(), format!("duplicate attribute `{}`", a[0].text));
                    }
                }
            }
            "port" => {
                if let Some(a) = args(n, 4, "port <id> in|out ok|ko <product-type>", d) {
                    let dir = keyword(&a[1], "direction", "in or out", |s| match s {
                        "in" => Some(Direction::In),
                        "out" => Some(Direction::Out),
                        _ => None,
                    }, d);
                    let chan = keyword(&a[2], "channel", "ok or ko", |s| match s {
                        "ok" => Some(Channel::Ok),
                        "ko" => Some(Channel::Ko),
                        _ => None,
                    }, d);
                    if let (Some(direction), Some(channel)) = (dir, chan) {
                        act.ports.push(PortDef {
                            id: PortId::new(a[0].text.clone()),
                            direction,
                            channel,
                            product_type: a[3].text.clone(),
                        });
                    }
                }
            }
            "context-var" => {
                if let Some(a) = args(n, 3, "context-var <name> fraction|integer|text <action>", d) {
                    if let Some(kind) = keyword(&a[1], "variable kind", "fraction, integer or text", VarKind::from_keyword, d) {
                        act.context_vars.push(ContextVarDef {
                            name: a[0].text.clone(),
                            kind,
                            updated_by: ActionRef(a[2].text.clone()),
                        });
                    }
                }
            }
            _ => unknown_key(n, d),
        }
    }
    act
}
