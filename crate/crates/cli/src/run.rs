use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use txdeploy_core::consistency::{render_records, render_table, ConsistencyReport};
use txdeploy_core::engine::{Aggregate, SiteRun};
use txdeploy_core::model::{MultiSiteMode, MultiSitePolicy};
use txdeploy_core::pml::{self, ParseDiagnostic};
use txdeploy_core::{parse_scenario, run_multi_site, Outcome, RecoveryPolicy, Scenario, ValidatedProcess};

use crate::output::write_atomic;
use crate::{MultiArg, ReportFormat, RunArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARTIAL: u8 = 1;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_INVALID: u8 = 3;
pub const EXIT_FAILED_SAFE: u8 = 4;
pub const EXIT_FAILED_UNSAFE: u8 = 5;
pub const EXIT_AGGREGATE: u8 = 6;

/// Exit status for a finished run. `aggregate` is present for multi-site
/// runs.
pub fn exit_code(outcomes: &[Outcome], aggregate: Option<Aggregate>, partial_ok: bool) -> u8 {
    if outcomes.contains(&Outcome::FailedUnsafe) {
        return EXIT_FAILED_UNSAFE;
    }
    match aggregate {
        Some(Aggregate::Failure) => return EXIT_AGGREGATE,
        None if outcomes.iter().any(|o| !o.is_success()) => return EXIT_FAILED_SAFE,
        _ => {}
    }
    if !partial_ok && outcomes.contains(&Outcome::SucceededPartial) {
        return EXIT_PARTIAL;
    }
    EXIT_OK
}

fn print_diagnostics(diags: &[ParseDiagnostic]) {
    for d in diags {
        eprintln!("{d}");
    }
}

fn read(path: &Path) -> Result<String, u8> {
    std::fs::read_to_string(path).map_err(|e| {
        eprintln!("{}: error: {e}", path.display());
        EXIT_PARSE
    })
}

fn load_process(path: &Path) -> Result<ValidatedProcess, u8> {
    let text = read(path)?;
    let parsed = pml::parse_named(&text, path).map_err(|d| {
        print_diagnostics(&d);
        EXIT_PARSE
    })?;
    print_diagnostics(&parsed.warnings);
    txdeploy_core::validate(parsed.value).map_err(|violations| {
        for v in &violations {
            eprintln!("{}: violation: {v}", path.display());
        }
        EXIT_INVALID
    })
}

fn load_world(path: &Path) -> Result<Scenario, u8> {
    let text = read(path)?;
    let parsed = parse_scenario(&text, path).map_err(|d| {
        print_diagnostics(&d);
        EXIT_PARSE
    })?;
    print_diagnostics(&parsed.warnings);
    Ok(parsed.value)
}

pub fn validate(path: &Path) -> u8 {
    match load_process(path) {
        Ok(p) => {
            let order: Vec<&str> = p.execution_order().iter().map(|a| a.as_str()).collect();
            println!("{}: valid ({})", path.display(), order.join(" -> "));
            EXIT_OK
        }
        Err(code) => code,
    }
}

fn recovery_policy(args: &RunArgs, scenario: &Scenario) -> Result<RecoveryPolicy, String> {
    let mut policy = scenario.recovery.clone();
    if let Some(t) = args.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(format!("--threshold must lie in [0, 1], got {t}"));
        }
        policy.contingency_threshold = t;
    }
    if let Some(n) = args.max_attempts {
        policy.max_contingency_attempts = n;
    }
    Ok(policy)
}

fn multi_policy(args: &RunArgs, process: &ValidatedProcess) -> Result<MultiSitePolicy, String> {
    let declared = process.definition().multi_site_policy.clone();
    let mode = match args.multi {
        Some(MultiArg::All) => MultiSiteMode::AllOrNothing,
        Some(MultiArg::Best) => MultiSiteMode::BestEffort,
        None => declared.as_ref().map_or(MultiSiteMode::AllOrNothing, |p| p.mode),
    };
    let retry_list_output = declared.as_ref().is_some_and(|p| p.retry_list_output);
    let min_success_fraction = match mode {
        MultiSiteMode::AllOrNothing => None,
        MultiSiteMode::BestEffort => {
            let f = args
                .min_fraction
                .or(declared.and_then(|p| p.min_success_fraction))
                .unwrap_or(1.0);
            if !(0.0..=1.0).contains(&f) {
                return Err(format!("--min-fraction must lie in [0, 1], got {f}"));
            }
            Some(f)
        }
    };
    Ok(MultiSitePolicy {
        mode,
        min_success_fraction,
        retry_list_output,
    })
}

fn trace_path(args: &RunArgs, process: &ValidatedProcess) -> PathBuf {
    if let Some(p) = &args.trace_out {
        return p.clone();
    }
    let world = args.world.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = format!("{}-{world}-{}.trace.jsonl", process.definition().name, args.seed);
    args.trace_dir.clone().unwrap_or_else(|| PathBuf::from(".")).join(name)
}

pub fn run(args: &RunArgs) -> u8 {
    match try_run(args) {
        Ok(code) | Err(code) => code,
    }
}

fn try_run(args: &RunArgs) -> Result<u8, u8> {
    let process = load_process(&args.process)?;
    let scenario = load_world(&args.world)?;
    let usage = |msg: String| {
        eprintln!("error: {msg}");
        EXIT_PARSE
    };
    let policy = recovery_policy(args, &scenario).map_err(usage)?;
    let multi = multi_policy(args, &process).map_err(usage)?;

    let result = run_multi_site(&process, scenario.worlds(), &policy, &multi, args.seed);
    let single = result.runs.len() == 1;
    let trace = if single {
        result.runs[0].trace_section(true)
    } else {
        result.trace_file()
    };
    let path = trace_path(args, &process);
    if let Err(e) = write_atomic(&path, &trace) {
        eprintln!("error: {e:#}");
        return Err(EXIT_PARSE);
    }

    let reports: Vec<ConsistencyReport> = result.runs.iter().map(SiteRun::report).collect();
    let mut out = String::new();
    match args.report {
        ReportFormat::Records => out.push_str(&render_records(&reports)),
        ReportFormat::Table if single => out.push_str(&render_table(&reports)),
        ReportFormat::Table => {
            let full = result.count(Outcome::SucceededFull);
            let listed: Vec<ConsistencyReport> = reports
                .iter()
                .filter(|r| r.outcome != Outcome::SucceededFull)
                .cloned()
                .collect();
            let mode = match multi.mode {
                MultiSiteMode::AllOrNothing => "all-or-nothing".to_owned(),
                MultiSiteMode::BestEffort => {
                    format!("best-effort, min {}", multi.min_success_fraction.unwrap_or(1.0))
                }
            };
            let _ = writeln!(
                out,
                "{} sites ({mode}): {full} SucceededFull, {} SucceededPartial, {} FailedSafe, {} FailedUnsafe",
                result.runs.len(),
                result.count(Outcome::SucceededPartial),
                result.count(Outcome::FailedSafe),
                result.count(Outcome::FailedUnsafe),
            );
            let _ = writeln!(out, "success fraction {:.3}, aggregate {:?}", result.success_fraction, result.aggregate);
            if !listed.is_empty() {
                out.push_str(&render_table(&listed));
            }
        }
    }
    if !single && (multi.retry_list_output || multi.mode == MultiSiteMode::BestEffort) {
        let ids: Vec<&str> = result.retry.iter().map(|s| s.as_str()).collect();
        let _ = writeln!(out, "retry list ({}): {}", ids.len(), ids.join(" "));
    }
    print!("{out}");
    eprintln!("trace written to {}", path.display());

    let outcomes: Vec<Outcome> = result.runs.iter().map(|r| r.state.outcome).collect();
    let aggregate = (!single).then_some(result.aggregate);
    let partial_ok = !args.no_partial_ok;
    Ok(exit_code(&outcomes, aggregate, partial_ok))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Outcome::*;

    #[test]
    fn single_site_codes() {
        assert_eq!(exit_code(&[SucceededFull], None, true), 0);
        assert_eq!(exit_code(&[SucceededPartial], None, true), 0);
        assert_eq!(exit_code(&[SucceededPartial], None, false), 1);
        assert_eq!(exit_code(&[FailedSafe], None, true), 4);
        assert_eq!(exit_code(&[FailedUnsafe], None, false), 5);
    }

    #[test]
    fn multi_site_codes() {
        let mixed = [SucceededFull, FailedSafe, SucceededPartial];
        assert_eq!(exit_code(&mixed, Some(Aggregate::Success), true), 0);
        assert_eq!(exit_code(&mixed, Some(Aggregate::Success), false), 1);
        assert_eq!(exit_code(&mixed, Some(Aggregate::Failure), true), 6);
        assert_eq!(exit_code(&[SucceededFull, FailedUnsafe], Some(Aggregate::Failure), true), 5);
    }
}
