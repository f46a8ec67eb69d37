use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use seqaudit_bench::{exact_design, mc_design, schedule};
use seqaudit_core::{calibrate, exact_outcome, oc_curve, replay, synth_population};

fn exact_calibration(c: &mut Criterion) {
    let mut g = c.benchmark_group("calibrate_exact");
    g.sample_size(10);
    for n in [100u32, 300] {
        let config = exact_design(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &config, |b, config| {
            b.iter(|| calibrate(black_box(config)).unwrap())
        });
    }
    g.finish();
}

fn mc_calibration(c: &mut Criterion) {
    let mut g = c.benchmark_group("calibrate_mc");
    g.sample_size(10);
    for (n, reps) in [(100u32, 10_000u32), (776, 3_000)] {
        let config = mc_design(n, reps);
        g.bench_with_input(BenchmarkId::new(format!("n{n}"), reps), &config, |b, config| {
            b.iter(|| calibrate(black_box(config)).unwrap())
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let s = schedule(100);
    let grid: Vec<u32> = (0..=100).collect();
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    g.bench_function("oc_curve_n100_all_m_1000_reps", |b| {
        b.iter(|| oc_curve(&s, black_box(&grid), 1_000, 2).unwrap())
    });
    g.bench_function("exact_outcome_n100_all_m", |b| {
        b.iter(|| {
            grid.iter()
                .map(|&m| exact_outcome(&s.rule, m).unwrap().accept_k)
                .sum::<f64>()
        })
    });
    let pop = synth_population(100, 20).unwrap();
    g.bench_function("replay_n100_1000_orders", |b| {
        b.iter(|| replay(black_box(&pop), &s, 1_000, 2).unwrap())
    });
    g.finish();
}

criterion_group!(benches, exact_calibration, mc_calibration, evaluation);
criterion_main!(benches);
