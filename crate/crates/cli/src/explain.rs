use std::fmt::Write as _;
use std::path::Path;

use txdeploy_core::engine::{check_transitions, parse_trace, TraceEvent, TraceKind, TraceRecord};

use crate::run::{EXIT_OK, EXIT_PARSE};

pub fn command(path: &Path) -> u8 {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: error: {e}", path.display());
            return EXIT_PARSE;
        }
    };
    match parse_trace(&text) {
        Ok(records) if records.is_empty() => {
            eprintln!("{}: error: empty trace", path.display());
            EXIT_PARSE
        }
        Ok(records) => {
            print!("{}", render(&records));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}:{e}", path.display());
            EXIT_PARSE
        }
    }
}

/// One row of the timeline: the clock, the lane it belongs to, a marker and
/// a description.
struct Row {
    clock: u64,
    lane: Option<String>,
    marker: char,
    text: String,
}

fn marker(kind: TraceKind) -> char {
    match kind {
        TraceKind::Started => '>',
        TraceKind::Finished => '+',
        TraceKind::ExceptionRaised => 'x',
        TraceKind::RoutedToKO => 'v',
        TraceKind::DecisionMade => '?',
        TraceKind::ContingencyRun => '~',
        TraceKind::CompensationRun => '<',
        TraceKind::SavepointTaken => 'o',
        TraceKind::SiteEffect => '.',
    }
}

/// The decision as shown to a reader: `Choice (reason)`.
pub fn decision_label(e: &TraceEvent) -> String {
    let choice = e.get("choice").unwrap_or("?");
    match e.get("reason") {
        Some(r) => format!("{choice} ({r})"),
        None => choice.to_owned(),
    }
}

fn describe(e: &TraceEvent) -> String {
    let who = e.activity.as_ref().map(|a| a.to_string());
    match (e.kind, who) {
        (TraceKind::Started, None) => format!(
            "run {} on {} (seed {})",
            e.get("process").unwrap_or("?"),
            e.get("site").unwrap_or("?"),
            e.get("seed").unwrap_or("?")
        ),
        (TraceKind::Finished, None) => format!("outcome {}", e.get("outcome").unwrap_or("?")),
        (TraceKind::Started, Some(a)) => format!("{a} started ({})", e.get("action").unwrap_or("?")),
        (TraceKind::Finished, Some(a)) => match e.get("faults") {
            Some(f) => format!("{a} succeeded despite {f}"),
            None => format!("{a} succeeded"),
        },
        (TraceKind::ExceptionRaised, a) => {
            let mut s = format!(
                "{} raised {}: {}",
                a.unwrap_or_default(),
                e.get("kind").unwrap_or("?"),
                e.get("detail").unwrap_or("")
            );
            if let Some(p) = e.get("progress") {
                let _ = write!(s, " at progress {p}");
            }
            s
        }
        (TraceKind::RoutedToKO, a) => format!("{} error routed to KO port {}", a.unwrap_or_default(), e.get("port").unwrap_or("?")),
        (TraceKind::DecisionMade, _) => {
            let mut s = format!("decision {}", decision_label(e));
            if let (Some(sp), Some("CompensateToSavepoint")) = (e.get("savepoint"), e.get("choice")) {
                let _ = write!(s, " -> savepoint {sp}");
            }
            s
        }
        (TraceKind::ContingencyRun, a) => {
            let mut s = format!(
                "contingency {} for {} {}",
                e.get("contingency").unwrap_or("?"),
                a.unwrap_or_default(),
                e.get("result").unwrap_or("?")
            );
            if let Some(d) = e.get("detail") {
                let _ = write!(s, ": {d}");
            }
            s
        }
        (TraceKind::CompensationRun, a) => {
            let mut s = format!(
                "compensate {} with {} {}",
                a.unwrap_or_default(),
                e.get("compensation").unwrap_or("?"),
                e.get("result").unwrap_or("?")
            );
            if let Some(d) = e.get("detail") {
                let _ = write!(s, ": {d}");
            }
            s
        }
        (TraceKind::SavepointTaken, _) => format!("savepoint {}", e.get("savepoint").unwrap_or("?")),
        (TraceKind::SiteEffect, a) => match e.get("rollback") {
            Some(n) => format!(
                "{} rolled back {n} effects on {}",
                a.unwrap_or_default(),
                e.get("site").unwrap_or("?")
            ),
            None => format!(
                "{} {} {}",
                a.unwrap_or_default(),
                e.get("effect").unwrap_or("?"),
                e.get("subject").unwrap_or("")
            ),
        },
    }
}

/// Folds runs of site effects from one activity into a single row.
fn rows(events: &[&TraceEvent]) -> Vec<Row> {
    let mut out: Vec<Row> = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let e = events[i];
        let lane = e.activity.as_ref().map(|a| a.to_string());
        if e.kind == TraceKind::SiteEffect {
            let mut j = i;
            let folds = |ev: &TraceEvent| {
                ev.kind == TraceKind::SiteEffect && ev.activity == e.activity && ev.get("rollback").is_none()
            };
            while j < events.len() && folds(events[j]) {
                j += 1;
            }
            let n = j - i;
            if n > 1 {
                let site = e.get("site").unwrap_or("?");
                let mut kinds: Vec<&str> = Vec::new();
                for ev in &events[i..j] {
                    let k = ev.get("effect").unwrap_or("?");
                    if !kinds.contains(&k) {
                        kinds.push(k);
                    }
                }
                out.push(Row {
                    clock: e.clock,
                    lane,
                    marker: marker(e.kind),
                    text: format!("{n} effects on {site} ({})", kinds.join(", ")),
                });
                i = j;
                continue;
            }
        }
        out.push(Row {
            clock: e.clock,
            lane,
            marker: marker(e.kind),
            text: describe(e),
        });
        i += 1;
    }
    out
}

fn render_run(events: &[&TraceEvent], out: &mut String) {
    let mut lanes: Vec<String> = Vec::new();
    for e in events {
        if let Some(a) = &e.activity {
            if !lanes.iter().any(|l| l == a.as_str()) {
                lanes.push(a.to_string());
            }
        }
    }
    let widths: Vec<usize> = lanes.iter().map(|l| l.chars().count().max(1)).collect();
    let _ = write!(out, "{:>5} ", "clock");
    for l in &lanes {
        let _ = write!(out, " {l}");
    }
    out.push('\n');
    for row in rows(events) {
        let _ = write!(out, "{:>5} ", row.clock);
        for (l, w) in lanes.iter().zip(&widths) {
            let cell = if row.lane.as_deref() == Some(l.as_str()) { row.marker } else { '|' };
            let _ = write!(out, " {cell:<w$}");
        }
        let _ = writeln!(out, "  {}", row.text);
    }
    if let Err(e) = check_transitions(events.iter().copied()) {
        let _ = writeln!(out, "warning: {e}");
    }
}

/// Renders every run section of a trace as a lane timeline followed by its
/// consistency report.
pub fn render(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    let mut events: Vec<&TraceEvent> = Vec::new();
    let flush = |events: &mut Vec<&TraceEvent>, out: &mut String| {
        if !events.is_empty() {
            render_run(events, out);
            events.clear();
        }
    };
    for r in records {
        match r {
            TraceRecord::Run { run } => {
                flush(&mut events, &mut out);
                if !out.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "== {} on {} (seed {})", run.process, run.site, run.seed);
            }
            TraceRecord::Event(e) => events.push(e),
            TraceRecord::Report { report } => {
                flush(&mut events, &mut out);
                let field = |k: &str| report.get(k).and_then(|v| v.as_str()).unwrap_or("?").to_owned();
                let _ = writeln!(
                    out,
                    "report: outcome {}, success {}, safety {}",
                    field("outcome"),
                    field("success"),
                    field("safety")
                );
                for ev in report.get("evidence").and_then(|v| v.as_array()).into_iter().flatten() {
                    let _ = writeln!(out, "  - {}", ev.as_str().unwrap_or_default());
                }
            }
        }
    }
    flush(&mut events, &mut out);
    out
}
