use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use gfarena_bench::{desk_trace, learner_and_batch};
use gfarena_core::nn::Mlp;
use gfarena_core::policies::{build_policy, waterfill_assign, PolicyTag};
use gfarena_core::qmix::qmix_loss;
use gfarena_core::{run_policy_on_trace, seeded_rng, Scenario};

fn mac(c: &mut Criterion) {
    let trace = desk_trace(12, 20_000);
    let scenario = Scenario::standard(12, 2);
    c.bench_function("random policy, 10 s of N'=12 traffic", |b| {
        b.iter(|| {
            let mut p = build_policy(PolicyTag::Random, 0, None).unwrap();
            run_policy_on_trace(p.as_mut(), black_box(&trace), &scenario, 0).unwrap()
        })
    });
}

fn networks(c: &mut Criterion) {
    let net = Mlp::agent(2, 8, &mut seeded_rng(0, 0));
    let x = [0.1, -0.3, 0.7, 1.2];
    c.bench_function("agent forward (4-8-2)", |b| b.iter(|| net.predict(black_box(&x))));

    let (learner, batch) = learner_and_batch(12, 2, 1024);
    let target = learner.clone();
    c.bench_function("qmix loss and gradient, batch 1024, N'=12", |b| {
        b.iter(|| qmix_loss(&learner, &target, black_box(&batch), 0.0))
    });
}

fn scheduling(c: &mut Criterion) {
    let rates: Vec<f64> = (0..96).map(|i| if i % 5 == 0 { 0.1 } else { 0.00833 }).collect();
    c.bench_function("water-filling, 96 devices on 16 resources", |b| {
        b.iter(|| waterfill_assign(black_box(&rates), 16))
    });
}

criterion_group!(benches, mac, networks, scheduling);
criterion_main!(benches);
