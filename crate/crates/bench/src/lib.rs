//! Fixtures shared by the benchmarks: the shipped scenarios, parsed once.

use std::path::Path;

use txdeploy_core::{parse_scenario, pml, validate, Scenario, ValidatedProcess};

pub const INSTALL: &str = include_str!("../../../scenarios/install.dproc");
pub const CLEAN: &str = include_str!("../../../scenarios/clean.world");
pub const MIRROR_10: &str = include_str!("../../../scenarios/mirror-10.world");
pub const THOUSAND: (&str, &str) = (
    include_str!("../../../scenarios/thousand.dproc"),
    include_str!("../../../scenarios/thousand.world"),
);

pub fn process(src: &str) -> ValidatedProcess {
    validate(pml::parse(src).expect("process parses").value).expect("process validates")
}

pub fn scenario(src: &str) -> Scenario {
    parse_scenario(src, Path::new("bench.world")).expect("world parses").value
}

/// The clean world with its single client replaced by `n` gateways, every
/// `fail_every`-th one failing its install.
pub fn gateways(n: usize, fail_every: usize) -> Scenario {
    let servers = &CLEAN[CLEAN.find("  server A").expect("server block")..CLEAN.find("  site client").expect("site block")];
    let mut src = format!("world gateways {{\n{servers}  site-range gw {n} {{\n    target\n    tag desktop\n  }}\n");
    for i in (0..n).step_by(fail_every.max(1)) {
        src.push_str(&format!(
            "  fault {{\n    trigger during-action install on gw-{i:04}\n    raise action-error \"disk full\"\n  }}\n"
        ));
    }
    src.push_str("}\n");
    scenario(&src)
}
