use std::fmt::Write;

use super::syntax::{quote, word};
use crate::model::*;

/// Canonical text for `process`: fixed key order, activities sorted by id,
/// product types sorted by name, two-space indentation, no blank lines.
pub fn serialize(process: &ProcessDefinition) -> String {
    let mut out = String::new();
    let w = &mut out;
    line(w, 0, format!("process {} {{", word(&process.name)));
    line(w, 1, format!("entry {}", word(process.entry_activity.as_str())));

    if let Some(policy) = &process.multi_site_policy {
        line(w, 1, "policy {".into());
        line(w, 2, format!("mode {}", policy.mode.keyword()));
        if let Some(f) = policy.min_success_fraction {
            line(w, 2, format!("min-success-fraction {f}"));
        }
        line(w, 2, format!("retry-list {}", policy.retry_list_output));
        line(w, 1, "}".into());
    }

    let mut types: Vec<&ProductTypeDef> = process.product_types.iter().collect();
    types.sort_by(|a, b| a.name.cmp(&b.name));
    for ty in types {
        line(w, 1, format!("product-type {} {{", word(&ty.name)));
        for (field, kind) in &ty.fields {
            line(w, 2, format!("{} {}", word(field), kind.keyword()));
        }
        line(w, 1, "}".into());
    }

    let mut acts: Vec<&ActivityDef> = process.activities.iter().collect();
    acts.sort_by(|a, b| a.id.cmp(&b.id));
    for a in acts {
        write_activity(w, a);
    }

    for flow in &process.dataflows {
        line(
            w,
            1,
            format!(
                "flow {} -> {}",
                word(&flow.from.to_string()),
                word(&flow.to.to_string())
            ),
        );
    }
    line(w, 0, "}".into());
    out
}

fn write_activity(w: &mut String, a: &ActivityDef) {
    line(w, 1, format!("activity {} {{", word(a.id.as_str())));
    if a.kind == ActivityKind::Composite {
        line(w, 2, "kind composite".into());
    }
    if let Some(role) = &a.role {
        line(w, 2, format!("role {}", word(role)));
    }
    if a.criticality == Criticality::NonCritical {
        line(w, 2, "criticality non-critical".into());
    }
    if let Some(action) = &a.action {
        line(w, 2, format!("action {}", word(action.as_str())));
    }
    if !a.children.is_empty() {
        let kids: Vec<String> = a.children.iter().map(|c| word(c.as_str())).collect();
        line(w, 2, format!("children {}", kids.join(" ")));
    }
    if let Some(scope) = a.savepoint {
        line(w, 2, format!("savepoint {}", scope.keyword()));
    }
    if let Some(t) = &a.contingency_of {
        line(w, 2, format!("contingency-of {}", word(t.as_str())));
    }
    if let Some(t) = &a.compensation_of {
        line(w, 2, format!("compensation-of {}", word(t.as_str())));
    }
    for (k, v) in &a.attributes {
        line(w, 2, format!("attribute {} {}", word(k), quote(v)));
    }
    for p in &a.ports {
        let dir = match p.direction {
            Direction::In => "in",
            Direction::Out => "out",
        };
        let chan = match p.channel {
            Channel::Ok => "ok",
            Channel::Ko => "ko",
        };
        line(
            w,
            2,
            format!("port {} {dir} {chan} {}", word(p.id.as_str()), word(&p.product_type)),
        );
    }
    for v in &a.context_vars {
        line(
            w,
            2,
            format!("context-var {} {} {}", word(&v.name), v.kind.keyword(), word(v.updated_by.as_str())),
        );
    }
    line(w, 1, "}".into());
}

fn line(w: &mut String, depth: usize, text: String) {
    for _ in 0..depth {
        w.push_str("  ");
    }
    let _ = writeln!(w, "{text}");
}
