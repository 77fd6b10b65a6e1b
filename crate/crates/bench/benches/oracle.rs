use criterion::{criterion_group, criterion_main, Criterion};
use mintime_core::linalg::vector;
use mintime_core::oracle::{proximal_subgradient_test, ProbeSet, Slack};
use mintime_core::{GridOptions, HjbGrid, ScenarioConfig};
use std::hint::black_box;

fn grid_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("hjb");
    g.sample_size(10);
    for name in ["eikonal-disk", "zermelo"] {
        let cfg = ScenarioConfig::preset(name).unwrap();
        let (model, geom) = (cfg.model().unwrap(), cfg.geometry().unwrap());
        let opts = GridOptions { h: 0.04, ..cfg.grid.clone() };
        g.bench_function(format!("{name} h=0.04"), |b| b.iter(|| HjbGrid::solve(&model, &geom, black_box(&opts)).unwrap()));
    }
    g.finish();
}

fn predicates(c: &mut Criterion) {
    let cfg = ScenarioConfig::preset("eikonal-disk").unwrap();
    let grid = HjbGrid::solve(&cfg.model().unwrap(), &cfg.geometry().unwrap(), &cfg.grid).unwrap();
    let probes = ProbeSet::new(2, 0);
    let (x, p) = (vector(&[2.0, 0.0]), vector(&[1.0, 0.0]));
    c.bench_function("proximal test on grid", |b| {
        b.iter(|| proximal_subgradient_test(&grid, black_box(&x), &p, 1.0, 0.2, &probes, Slack::grid(grid.h)))
    });
    c.bench_function("grid interpolation", |b| b.iter(|| grid.value_at(black_box(&x))));
}

criterion_group!(benches, grid_solve, predicates);
criterion_main!(benches);
