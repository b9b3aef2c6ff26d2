//! Reading and writing `.dproc` process files.
//!
//! The grammar is documented in `docs/pml.md`. Parsing mirrors the file
//! structurally; graph rules are left to [`crate::model::validate`].

mod diag;
mod process;
mod serialize;
pub(crate) mod syntax;

use std::path::Path;

pub use diag::{ParseDiagnostic, Severity, SourceSpan};
pub(crate) use diag::Diags;
pub(crate) use process::{args, block, boolean, fraction, keyword, unknown_key, Seen};
pub use serialize::serialize;

use crate::model::ProcessDefinition;

/// A successful parse plus any warnings (unknown keys).
#[derive(Clone, Debug, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub warnings: Vec<ParseDiagnostic>,
}

/// Parses process text; diagnostics name `<input>` as their file.
pub fn parse(source: &str) -> Result<Parsed<ProcessDefinition>, Vec<ParseDiagnostic>> {
    parse_named(source, Path::new("<input>"))
}

/// Parses process text read from `file`.
pub fn parse_named(source: &str, file: &Path) -> Result<Parsed<ProcessDefinition>, Vec<ParseDiagnostic>> {
    let mut d = Diags::new(file);
    let tree = syntax::parse_tree(source, &mut d);
    let def = process::read_process(&tree, &mut d);
    match def {
        Some(value) if !d.has_errors() => Ok(Parsed {
            value,
            warnings: d.list,
        }),
        _ => Err(d.list),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_expects_header() {
        let errs = parse("").unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].message, "expected process header");
        assert_eq!((errs[0].span.line, errs[0].span.column), (1, 1));
        assert_eq!(errs[0].severity, Severity::Error);
    }

    #[test]
    fn minimal_process_is_six_canonical_lines() {
        let mut p = ProcessDefinition::new("minimal", "Install");
        p.activities.push(ActivityDef::simple("Install", ActionKind::Install));
        let text = serialize(&p);
        assert_eq!(
            text,
            "process minimal {\n  entry Install\n  activity Install {\n    action install\n  }\n}\n"
        );
        assert_eq!(text.lines().count(), 6);
        assert_eq!(serialize(&p), text);
        assert_eq!(parse(&text).unwrap().value, p);
    }

    #[test]
    fn unknown_keys_warn_and_are_skipped() {
        let src = "process p {\n  entry a\n  colour blue\n  activity a {\n    action search\n    future {\n      x 1\n    }\n  }\n}\n";
        let parsed = parse(src).unwrap();
        assert_eq!(parsed.warnings.len(), 2);
        assert!(parsed.warnings.iter().all(|w| w.severity == Severity::Warning));
        assert_eq!(parsed.warnings[0].span.line, 3);
        assert_eq!(parsed.value.activities.len(), 1);
    }

    #[test]
    fn duplicate_keys_are_errors() {
        let src = "process p {\n  entry a\n  entry b\n  activity a {\n    action search\n    action install\n    attribute k \"1\"\n    attribute k \"2\"\n  }\n}\n";
        let errs = parse(src).unwrap_err();
        let lines: Vec<usize> = errs
            .iter()
            .filter(|e| e.severity == Severity::Error)
            .map(|e| e.span.line)
            .collect();
        assert_eq!(lines, vec![3, 6, 8]);
    }

    #[test]
    fn reports_several_errors_with_positions() {
        let src = "process p {\n  entry a\n  activity a {\n    port ko sideways ko T\n  }\n  flow a -> b.x\n}\n";
        let errs = parse(src).unwrap_err();
        assert_eq!(errs.len(), 2);
        assert_eq!((errs[0].span.line, errs[0].span.column, errs[0].span.length), (4, 13, 8));
        assert_eq!((errs[1].span.line, errs[1].span.column), (6, 8));
    }

    #[test]
    fn missing_entry_is_an_error() {
        let errs = parse("process p {\n}\n").unwrap_err();
        assert_eq!(errs[0].message, "missing `entry`");
    }

    #[test]
    fn content_after_process_block_is_an_error() {
        let errs = parse("process p {\n  entry a\n}\nactivity b {\n}\n").unwrap_err();
        assert_eq!(errs[0].span.line, 4);
    }

    // --- generator for round-trip properties ---

    fn ident() -> impl Strategy<Value = String> {
        "[A-Za-z_][A-Za-z0-9_-]{0,8}"
    }

    fn text_value() -> impl Strategy<Value = String> {
        prop_oneof![ident(), "[ -~]{0,12}", Just("quote\"back\\slash\nnl\ttab".to_string())]
    }

    fn port() -> impl Strategy<Value = PortDef> {
        (ident(), any::<bool>(), any::<bool>(), ident()).prop_map(|(id, i, ok, ty)| PortDef {
            id: id.into(),
            direction: if i { Direction::In } else { Direction::Out },
            channel: if ok { Channel::Ok } else { Channel::Ko },
            product_type: ty,
        })
    }

    fn activity() -> impl Strategy<Value = ActivityDef> {
        (
            ident(),
            any::<bool>(),
            prop::collection::vec(ident(), 0..3),
            prop::option::of(ident()),
            prop::collection::btree_map(ident(), text_value(), 0..3),
            any::<bool>(),
            prop::collection::vec(port(), 0..4),
            prop::option::of(prop::sample::select(ActionKind::ALL.to_vec())),
            prop::option::of(prop::sample::select(vec![SnapshotScope::SiteState, SnapshotScope::SiteStateAndProducts])),
            prop::option::of(ident()),
            prop::option::of(ident()),
            prop::collection::vec((ident(), prop::sample::select(vec![VarKind::Fraction, VarKind::Integer, VarKind::Text])), 0..2),
        )
            .prop_map(|(id, composite, children, role, attributes, nc, ports, action, savepoint, cont, comp, vars)| ActivityDef {
                id: id.into(),
                kind: if composite { ActivityKind::Composite } else { ActivityKind::Simple },
                children: children.into_iter().map(Into::into).collect(),
                role,
                attributes,
                criticality: if nc { Criticality::NonCritical } else { Criticality::Critical },
                ports,
                action: action.map(ActionRef::from),
                savepoint,
                contingency_of: cont.map(Into::into),
                compensation_of: comp.map(Into::into),
                context_vars: vars
                    .into_iter()
                    .map(|(name, kind)| ContextVarDef { name, kind, updated_by: ActionKind::Transfer.into() })
                    .collect(),
            })
    }

    fn definition() -> impl Strategy<Value = ProcessDefinition> {
        (
            ident(),
            ident(),
            prop::collection::vec(activity(), 1..5),
            prop::collection::vec((ident(), ident(), ident(), ident()), 0..4),
            prop::collection::vec((ident(), prop::collection::btree_map(ident(), prop::sample::select(ScalarKind::ALL.to_vec()), 0..4)), 0..3),
            prop::option::of(prop_oneof![
                Just(MultiSitePolicy::all_or_nothing()),
                (0u32..=100, any::<bool>()).prop_map(|(k, retry)| MultiSitePolicy {
                    retry_list_output: retry,
                    ..MultiSitePolicy::best_effort(k as f64 / 100.0)
                }),
            ]),
        )
            .prop_map(|(name, entry, activities, flows, types, policy)| {
                let mut p = ProcessDefinition::new(name, entry);
                p.activities = activities;
                p.dataflows = flows
                    .into_iter()
                    .map(|(a, pa, b, pb)| DataflowDef { from: Endpoint::new(a, pa), to: Endpoint::new(b, pb) })
                    .collect();
                p.product_types = types.into_iter().map(|(name, fields)| ProductTypeDef { name, fields }).collect();
                p.multi_site_policy = policy;
                p.normalize();
                p
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn parse_serialize_round_trip(d in definition()) {
            let text = serialize(&d);
            let parsed = parse(&text).map_err(|e| TestCaseError::fail(format!("{e:?}\n{text}")))?;
            prop_assert!(parsed.warnings.is_empty());
            prop_assert_eq!(&parsed.value, &d);
            prop_assert_eq!(serialize(&parsed.value), text);
        }

        #[test]
        fn parser_is_total_and_spans_in_bounds(src in "(process|activity|entry|flow|port|[{}\"#\n a-z.>-]){0,60}") {
            match parse(&src) {
                Ok(p) => for w in &p.warnings { prop_assert!(w.span.is_within(&src), "{w}") },
                Err(errs) => {
                    prop_assert!(!errs.is_empty());
                    for e in &errs { prop_assert!(e.span.is_within(&src), "{e} in {src:?}") }
                }
            }
        }
    }
}
