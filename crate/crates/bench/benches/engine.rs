use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use num_bigint::BigInt;
use rankone::poisson::MC_CHUNK;
use rankone::ratio::rat;
use rankone::sidon::{CnuDescriptor, Psi, SidonConstantRule};
use rankone::{
    check_sidon, cylinder_measure, generate_cnu, mc_estimate, Construction, ConstructionSpec,
    CorrelationEngine, CylinderConjunction, CylinderEvent, DivergenceScenario, FloorSet, Level,
    StageParams,
};

fn sidon(r: usize) -> Arc<Construction> {
    let rule = SidonConstantRule { r, psi: Psi::default() };
    Arc::new(Construction::new(ConstructionSpec::rule(1, rule)).unwrap())
}

fn correlation(c: &mut Criterion) {
    let mut g = c.benchmark_group("correlation");
    for r in [2usize, 3, 4] {
        let cons = sidon(r);
        let x1 = cons.x1();
        let lag = cons.offsets(3).unwrap()[1].clone();
        g.bench_with_input(BenchmarkId::new("lag_q2_stage3", r), &lag, |b, n| {
            b.iter(|| {
                // fresh engine so the stage cache does not hide the work
                let e = CorrelationEngine::new(cons.clone());
                e.correlation(n, &x1, &x1, &rat(0, 1)).unwrap()
            })
        });
    }
    let desc = CnuDescriptor::new(rat(1, 1), 2).unwrap();
    let c1 = Arc::new(Construction::new(generate_cnu(&desc, 5).unwrap()).unwrap());
    for m in [3usize, 4, 5] {
        g.bench_with_input(BenchmarkId::new("power_sum_c1", m), &m, |b, &m| {
            b.iter(|| CorrelationEngine::new(c1.clone()).power_sum(1, m).unwrap())
        });
    }
    g.finish();
}

fn sidon_check(c: &mut Criterion) {
    let cons = sidon(6);
    c.bench_function("check_sidon_r6_5_stages", |b| b.iter(|| check_sidon(&cons, 5).unwrap()));
}

fn poisson(c: &mut Criterion) {
    let cons = Construction::new(ConstructionSpec::explicit(
        1,
        vec![StageParams::new([2, 4, 8]), StageParams::new([0, 40])],
    ))
    .unwrap();
    let fs = |s: usize, a: i64, b: i64| FloorSet::from_intervals(s, vec![(BigInt::from(a), BigInt::from(b))]);
    let conj = CylinderConjunction::new(vec![
        CylinderEvent::new(fs(1, 0, 1), 1),
        CylinderEvent::new(fs(2, 3, 5), 0),
        CylinderEvent::new(fs(2, 4, 9), 2),
    ]);
    let mut g = c.benchmark_group("poisson");
    g.bench_function("cylinder_measure_overlapping", |b| {
        b.iter(|| cylinder_measure(&cons, &conj).unwrap())
    });
    g.bench_function("mc_one_chunk", |b| {
        b.iter(|| mc_estimate(&cons, &conj, &fs(2, 0, 17), MC_CHUNK, 1, 1).unwrap())
    });
    g.finish();
}

fn divergence(c: &mut Criterion) {
    let sc = DivergenceScenario::build(
        rankone::SequencePair::default_pair(),
        1,
        3,
        Default::default(),
        rankone::WindowRule::Gapped,
    )
    .unwrap();
    let mut g = c.benchmark_group("divergence");
    g.sample_size(20);
    g.bench_function("verify_windows_3_stages", |b| b.iter(|| sc.verify_windows(1).unwrap()));
    g.bench_function("poisson_series_2163", |b| {
        b.iter(|| sc.average_series(2163, Level::Poisson, 1).unwrap())
    });
    g.finish();
}

criterion_group!(benches, correlation, sidon_check, poisson, divergence);
criterion_main!(benches);
