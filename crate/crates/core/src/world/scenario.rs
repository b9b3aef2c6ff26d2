//! `.world` scenario files: servers, sites, faults and the recovery policy.

use std::collections::BTreeSet;
use std::path::Path;

use super::fault::{Fault, FaultScript, Trigger};
use super::package::{PackageDescriptor, Server, VersionConstraint};
use super::site::{ComponentKey, SiteState};
use super::World;
use crate::engine::RecoveryPolicy;
use crate::ids::{is_identifier, ServerId, SiteId};
use crate::model::ActionKind;
use crate::pml::syntax::{parse_tree, Node, Word};
use crate::pml::{args, block, boolean, fraction, keyword, unknown_key, Diags, ParseDiagnostic, Parsed, Seen};

/// A parsed scenario. `template` holds every site; [`Scenario::world`]
/// derives the world seen by one deployment target.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub template: World,
    pub targets: Vec<SiteId>,
    pub recovery: RecoveryPolicy,
}

impl Scenario {
    /// The world for one target: other target sites are removed, and so are
    /// faults aimed at them.
    pub fn world(&self, target: &SiteId) -> World {
        let others: BTreeSet<&SiteId> = self.targets.iter().filter(|t| *t != target).collect();
        let mut w = self.template.clone();
        w.sites.retain(|id, _| !others.contains(id));
        w.target = target.clone();
        let script = FaultScript {
            entries: self
                .template
                .script
                .entries
                .iter()
                .filter(|e| {
                    let aimed_elsewhere = e.trigger.target().is_some_and(|t| others.iter().any(|o| o.as_str() == t));
                    let hits_elsewhere = matches!(&e.fault, Fault::LinkDown(s) if others.contains(s));
                    !aimed_elsewhere && !hits_elsewhere
                })
                .cloned()
                .collect(),
        };
        w.with_faults(script)
    }

    pub fn worlds(&self) -> Vec<World> {
        self.targets.iter().map(|t| self.world(t)).collect()
    }
}

pub fn parse_scenario(source: &str, file: &Path) -> Result<Parsed<Scenario>, Vec<ParseDiagnostic>> {
    let mut d = Diags::new(file);
    let tree = parse_tree(source, &mut d);
    let scenario = read_world(&tree, &mut d);
    match scenario {
        Some(value) if !d.has_errors() => Ok(Parsed {
            value,
            warnings: d.list,
        }),
        _ => Err(d.list),
    }
}

struct SiteDecl {
    site: SiteState,
    target: bool,
    installed: Vec<(ComponentKey, bool, (usize, usize, usize))>,
}

fn read_world(tree: &[Node], d: &mut Diags) -> Option<Scenario> {
    let Some(first) = tree.first() else {
        d.error((1, 1, 0), "expected world header");
        return None;
    };
    if first.keyword() != "world" || first.body.is_none() {
        d.error(first.head().at(), "expected world header");
        return None;
    }
    for extra in &tree[1..] {
        d.error(extra.head().at(), "unexpected statement after the world block");
    }
    let (header, body) = block(first, 1, "world <name> {", d)?;

    let mut recovery = RecoveryPolicy::default();
    let mut servers: Vec<Server> = Vec::new();
    let mut sites: Vec<SiteDecl> = Vec::new();
    let mut script = FaultScript::new();
    let mut seen = Seen::default();
    for node in body {
        match node.keyword() {
            "recovery" => {
                if seen.first(node, d) {
                    if let Some((_, b)) = block(node, 0, "recovery {", d) {
                        read_recovery(b, &mut recovery, d);
                    }
                }
            }
            "server" => {
                if let Some((a, b)) = block(node, 1, "server <id> {", d) {
                    if let Some(s) = read_server(&a[0], b, d) {
                        if servers.iter().any(|x| x.id == s.id) {
                            d.error(a[0].at(), format!("duplicate server `{}`", s.id));
                        }
                        servers.push(s);
                    }
                }
            }
            "site" => {
                if let Some((a, b)) = block(node, 1, "site <id> {", d) {
                    if ident(&a[0], d) {
                        sites.push(read_site(SiteState::new(a[0].text.as_str()), b, d));
                    }
                }
            }
            "site-range" => {
                if let Some((a, b)) = block(node, 2, "site-range <prefix> <count> {", d) {
                    let count = a[1].text.parse::<usize>().ok().filter(|_| !a[1].quoted);
                    let Some(count) = count else {
                        d.error(a[1].at(), format!("expected a count, found `{}`", a[1].text));
                        continue;
                    };
                    if !ident(&a[0], d) {
                        continue;
                    }
                    let width = count.saturating_sub(1).to_string().len().max(4);
                    let proto = read_site(SiteState::new(""), b, d);
                    for i in 0..count {
                        let id = SiteId::from(format!("{}-{i:0width$}", a[0].text));
                        let mut site = proto.site.clone();
                        site.id = id;
                        sites.push(SiteDecl {
                            site,
                            target: proto.target,
                            installed: proto.installed.clone(),
                        });
                    }
                }
            }
            "fault" => {
                if let Some((_, b)) = block(node, 0, "fault {", d) {
                    if let Some((trigger, fault)) = read_fault(node, b, d) {
                        script = script.with(trigger, fault);
                    }
                }
            }
            _ => unknown_key(node, d),
        }
    }

    let mut ids = BTreeSet::new();
    for s in &sites {
        if !ids.insert(s.site.id.clone()) {
            d.error(header[0].at(), format!("duplicate site `{}`", s.site.id));
        }
    }
    let targets: Vec<SiteId> = sites.iter().filter(|s| s.target).map(|s| s.site.id.clone()).collect();
    let Some(first_target) = targets.first() else {
        d.error(first.head().at(), "world declares no target site");
        return None;
    };
    let server_ids: BTreeSet<&str> = servers.iter().map(|s| s.id.as_str()).collect();
    for e in &script.entries {
        let named = e.trigger.target().into_iter().chain(match &e.fault {
            Fault::ServerDown(s) => Some(s.as_str()),
            Fault::LinkDown(s) => Some(s.as_str()),
            Fault::ActionError(_) => None,
        });
        for n in named {
            if !ids.contains(n) && !server_ids.contains(n) {
                d.error(first.head().at(), format!("fault names unknown site or server `{n}`"));
            }
        }
    }

    let mut world = World::new(&header[0].text, first_target.clone());
    for s in servers {
        world = world.with_server(s);
    }
    let mut preinstalls = Vec::new();
    for decl in sites {
        for (c, active, at) in decl.installed {
            preinstalls.push((decl.site.id.clone(), c, active, at));
        }
        world = world.with_site(decl.site);
    }
    for (site, c, active, at) in preinstalls {
        if let Err(e) = world.preinstall(&site, c, active) {
            d.error(at, e);
        }
    }
    world = world.with_faults(script);
    Some(Scenario {
        template: world,
        targets,
        recovery,
    })
}

fn ident(w: &Word, d: &mut Diags) -> bool {
    let ok = is_identifier(&w.text);
    if !ok {
        d.error(w.at(), format!("invalid identifier `{}`", w.text));
    }
    ok
}

fn read_recovery(body: &[Node], r: &mut RecoveryPolicy, d: &mut Diags) {
    let mut seen = Seen::default();
    for n in body {
        let known = matches!(
            n.keyword(),
            "threshold" | "driving-var" | "max-contingency-attempts" | "resume-after-compensation"
        );
        if !known {
            unknown_key(n, d);
            continue;
        }
        if !seen.first(n, d) {
            continue;
        }
        let Some(a) = args(n, 1, &format!("{} <value>", n.keyword()), d) else {
            continue;
        };
        match n.keyword() {
            "threshold" => {
                if let Some(f) = fraction(&a[0], d) {
                    if (0.0..=1.0).contains(&f) {
                        r.contingency_threshold = f;
                    } else {
                        d.error(a[0].at(), "threshold must be within [0, 1]");
                    }
                }
            }
            "driving-var" => r.driving_var = a[0].text.clone(),
            "max-contingency-attempts" => match a[0].text.parse::<u32>() {
                Ok(v) => r.max_contingency_attempts = v,
                Err(_) => d.error(a[0].at(), format!("expected a count, found `{}`", a[0].text)),
            },
            _ => {
                if let Some(b) = boolean(&a[0], d) {
                    r.resume_after_compensation = b;
                }
            }
        }
    }
}

fn read_server(id: &Word, body: &[Node], d: &mut Diags) -> Option<Server> {
    if !ident(id, d) {
        return None;
    }
    let mut server = Server::new(ServerId::from(id.text.as_str()));
    for n in body {
        match n.keyword() {
            "down" => {
                if args(n, 0, "down", d).is_some() {
                    server.up = false;
                }
            }
            "package" => {
                if let Some((a, b)) = block(n, 2, "package <app> <version> {", d) {
                    let pkg = read_package(&a[0].text, &a[1].text, b, d);
                    if let Err(e) = pkg.check() {
                        d.error(a[0].at(), e);
                    }
                    server = server.hosting(pkg);
                }
            }
            _ => unknown_key(n, d),
        }
    }
    Some(server)
}

fn read_package(app: &str, version: &str, body: &[Node], d: &mut Diags) -> PackageDescriptor {
    let mut pkg = PackageDescriptor::new(app, version);
    for n in body {
        match n.keyword() {
            "component" => {
                if let Some(a) = args(n, 3, "component <id> mandatory|optional <units>", d) {
                    let mandatory = keyword(&a[1], "component kind", "mandatory or optional", |s| match s {
                        "mandatory" => Some(true),
                        "optional" => Some(false),
                        _ => None,
                    }, d);
                    let units = a[2].text.parse::<u32>().ok();
                    if units.is_none() {
                        d.error(a[2].at(), format!("expected a unit count, found `{}`", a[2].text));
                    }
                    if let (Some(m), Some(u)) = (mandatory, units) {
                        pkg = pkg.with_component(&a[0].text, m, u);
                    }
                }
            }
            "depends-on" => {
                if let Some(a) = args(n, 2, "depends-on <app> =<version>|>=<version>", d) {
                    match VersionConstraint::parse(&a[1].text) {
                        Some(c) => pkg = pkg.depending_on(&a[0].text, c),
                        None => d.error(a[1].at(), format!("bad version constraint `{}`", a[1].text)),
                    }
                }
            }
            "requires-tag" => {
                if let Some(a) = args(n, 1, "requires-tag <tag>", d) {
                    pkg.requires_tags.insert(a[0].text.clone());
                }
            }
            _ => unknown_key(n, d),
        }
    }
    pkg
}

fn read_site(site: SiteState, body: &[Node], d: &mut Diags) -> SiteDecl {
    let mut decl = SiteDecl {
        site,
        target: false,
        installed: Vec::new(),
    };
    for n in body {
        match n.keyword() {
            "target" => {
                if args(n, 0, "target", d).is_some() {
                    decl.target = true;
                }
            }
            "tag" => {
                if let Some(a) = args(n, 1, "tag <tag>", d) {
                    decl.site.platform_tags.insert(a[0].text.clone());
                }
            }
            "installed" => {
                if let Some(a) = args(n, 4, "installed <app> <version> <component> active|inactive", d) {
                    let active = keyword(&a[3], "state", "active or inactive", |s| match s {
                        "active" => Some(true),
                        "inactive" => Some(false),
                        _ => None,
                    }, d);
                    if let Some(active) = active {
                        let key = ComponentKey {
                            app: a[0].text.clone(),
                            version: a[1].text.clone(),
                            component: a[2].text.clone(),
                        };
                        decl.installed.push((key, active, n.head().at()));
                    }
                }
            }
            _ => unknown_key(n, d),
        }
    }
    decl
}

fn read_fault(node: &Node, body: &[Node], d: &mut Diags) -> Option<(Trigger, Fault)> {
    let mut trigger = None;
    let mut fault = None;
    let mut seen = Seen::default();
    for n in body {
        match n.keyword() {
            "trigger" => {
                if seen.first(n, d) {
                    trigger = read_trigger(n, d);
                }
            }
            "raise" => {
                if seen.first(n, d) {
                    fault = read_raise(n, d);
                }
            }
            _ => unknown_key(n, d),
        }
    }
    if trigger.is_none() && !seen_key(body, "trigger") {
        d.error(node.head().at(), "fault needs a `trigger`");
    }
    if fault.is_none() && !seen_key(body, "raise") {
        d.error(node.head().at(), "fault needs a `raise`");
    }
    Some((trigger?, fault?))
}

fn seen_key(body: &[Node], key: &str) -> bool {
    body.iter().any(|n| n.keyword() == key)
}

fn action(w: &Word, d: &mut Diags) -> Option<ActionKind> {
    let names: Vec<&str> = ActionKind::ALL.iter().map(|a| a.name()).collect();
    keyword(w, "action", &names.join(", "), ActionKind::from_name, d)
}

/// `on <target>` and `occurrence <n>` suffixes.
fn trigger_options(rest: &[Word], allow_occurrence: bool, d: &mut Diags) -> Option<(Option<String>, u32)> {
    let mut target = None;
    let mut occurrence = 1;
    let mut i = 0;
    while i < rest.len() {
        let key = &rest[i];
        let Some(val) = rest.get(i + 1) else {
            d.error(key.at(), format!("`{}` needs a value", key.text));
            return None;
        };
        match key.text.as_str() {
            "on" => target = Some(val.text.clone()),
            "occurrence" if allow_occurrence => match val.text.parse::<u32>() {
                Ok(n) if n >= 1 => occurrence = n,
                _ => {
                    d.error(val.at(), "occurrence must be a positive integer");
                    return None;
                }
            },
            _ => {
                d.error(key.at(), format!("unexpected `{}` in trigger", key.text));
                return None;
            }
        }
        i += 2;
    }
    Some((target, occurrence))
}

fn read_trigger(n: &Node, d: &mut Diags) -> Option<Trigger> {
    let a = n.args();
    let usage = "trigger at-clock <n> | during-action <action> [on <id>] [occurrence <n>] | after-fraction <action> <f> [on <id>]";
    let Some(kind) = a.first() else {
        d.error(n.head().at(), format!("expected: {usage}"));
        return None;
    };
    match kind.text.as_str() {
        "at-clock" if a.len() == 2 => match a[1].text.parse::<u64>() {
            Ok(c) => Some(Trigger::AtClock(c)),
            Err(_) => {
                d.error(a[1].at(), format!("expected a clock value, found `{}`", a[1].text));
                None
            }
        },
        "during-action" if a.len() >= 2 => {
            let action = action(&a[1], d)?;
            let (target, occurrence) = trigger_options(&a[2..], true, d)?;
            Some(Trigger::DuringAction {
                action,
                target,
                occurrence,
            })
        }
        "after-fraction" if a.len() >= 3 => {
            let action = action(&a[1], d)?;
            let f = fraction(&a[2], d)?;
            if !(0.0..=1.0).contains(&f) {
                d.error(a[2].at(), "fraction must be within [0, 1]");
                return None;
            }
            let (target, _) = trigger_options(&a[3..], false, d)?;
            Some(Trigger::AfterFraction {
                action,
                fraction: f,
                target,
            })
        }
        _ => {
            d.error(kind.at(), format!("expected: {usage}"));
            None
        }
    }
}

fn read_raise(n: &Node, d: &mut Diags) -> Option<Fault> {
    let a = args(n, 2, "raise server-down <server> | link-down <site> | action-error \"<detail>\"", d)?;
    match a[0].text.as_str() {
        "server-down" => Some(Fault::ServerDown(ServerId::from(a[1].text.as_str()))),
        "link-down" => Some(Fault::LinkDown(SiteId::from(a[1].text.as_str()))),
        "action-error" => Some(Fault::ActionError(a[1].text.clone())),
        other => {
            d.error(a[0].at(), format!("unknown fault `{other}` (expected server-down, link-down or action-error)"));
            None
        }
    }
}
