use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use txdeploy_bench::*;
use txdeploy_core::model::MultiSitePolicy;
use txdeploy_core::{pml, run, run_multi_site};

fn text(c: &mut Criterion) {
    c.bench_function("parse install.dproc", |b| b.iter(|| pml::parse(INSTALL).unwrap()));
    let def = pml::parse(INSTALL).unwrap().value;
    c.bench_function("serialize install.dproc", |b| b.iter(|| pml::serialize(&def)));
    c.bench_function("validate install.dproc", |b| {
        b.iter_batched(|| def.clone(), txdeploy_core::validate, BatchSize::SmallInput)
    });
}

fn single_site(c: &mut Criterion) {
    let p = process(INSTALL);
    for (name, src) in [("clean", CLEAN), ("mirror-10", MIRROR_10)] {
        let sc = scenario(src);
        let w = sc.world(&sc.targets[0]);
        c.bench_function(&format!("run install on {name}"), |b| {
            b.iter_batched(|| w.clone(), |mut w| run(&p, &mut w, &sc.recovery, 0), BatchSize::SmallInput)
        });
    }
}

fn multi_site(c: &mut Criterion) {
    let p = process(INSTALL);
    let sc = gateways(100, 10);
    let mut g = c.benchmark_group("multi-site");
    g.sample_size(10);
    for (name, policy) in [
        ("100 gateways all-or-nothing", MultiSitePolicy::all_or_nothing()),
        ("100 gateways best-effort", MultiSitePolicy::best_effort(0.9)),
    ] {
        g.bench_function(name, |b| {
            b.iter_batched(|| sc.worlds(), |ws| run_multi_site(&p, ws, &sc.recovery, &policy, 0), BatchSize::LargeInput)
        });
    }
    let tp = process(THOUSAND.0);
    let tsc = scenario(THOUSAND.1);
    let policy = tp.definition().multi_site_policy.clone().unwrap();
    g.bench_function("thousand gateways", |b| {
        b.iter_batched(|| tsc.worlds(), |ws| run_multi_site(&tp, ws, &tsc.recovery, &policy, 0), BatchSize::LargeInput)
    });
    g.finish();
}

criterion_group!(benches, text, single_site, multi_site);
criterion_main!(benches);
