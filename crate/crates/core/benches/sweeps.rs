//! Parallel against sequential sweeps over independent return maps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hysreg::model::ModelParams;
use hysreg::pws::PwsSystem;
use hysreg::regfun::RegFun;
use hysreg::sliding::return_map;
use hysreg::sweep::{par_map, seq_map};

fn sweeps(c: &mut Criterion) {
    let m = ModelParams::new(1e-2, 1e-2, RegFun::arctan(), PwsSystem::curved_slider()).unwrap();
    let xs: Vec<f64> = (0..16).map(|i| -0.4 + 0.05 * i as f64).collect();
    let mut g = c.benchmark_group("return_map_sweep");
    g.sample_size(10);
    g.bench_function("sequential", |b| b.iter(|| seq_map(black_box(&xs), |&x| return_map(&m, x, 0.0).unwrap().x_out)));
    g.bench_function("parallel", |b| b.iter(|| par_map(black_box(&xs), |&x| return_map(&m, x, 0.0).unwrap().x_out)));
    g.finish();
}

criterion_group!(benches, sweeps);
criterion_main!(benches);
