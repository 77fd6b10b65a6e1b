//! Frozen pipeline checks against closed-form values.

use mintime_core::charflow::FlowOptions;
use mintime_core::linalg::vector;
use mintime_core::{Characteristics, ConjugateDetector, GridOptions, HjbGrid, Level, MinTimeField, ScenarioConfig};
use proptest::prelude::*;

const CURVED: &str = r#"
name = "curved"
[system]
n = 2
drift = { kind = "linear", matrix = [[0.0, -0.2], [0.2, 0.0]], offset = [0.5, 0.0] }
fields = [{ kind = "identity" }]
[target]
kind = "disk"
center = [0.0, 0.0]
radius = 1.0
"#;

fn terminal(cfg: &ScenarioConfig, step: f64, eta: f64, s: f64) -> Vec<f64> {
    let (model, geom) = (cfg.model().unwrap(), cfg.geometry().unwrap());
    let flow = Characteristics::new(&model, &geom, FlowOptions { step, t_max: s, ..cfg.flow.clone() }).unwrap();
    flow.state_at(0, &[eta], s, Level::Variational).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn rk4_is_fourth_order_on_a_state_dependent_system() {
    let cfg = ScenarioConfig::from_toml(CURVED).unwrap();
    for eta in [0.3, 2.0, 4.0] {
        let reference = terminal(&cfg, 0.04 / 16.0, eta, 1.6);
        let coarse = dist(&terminal(&cfg, 0.04, eta, 1.6), &reference);
        let fine = dist(&terminal(&cfg, 0.02, eta, 1.6), &reference);
        assert!(coarse > 1e-12, "eta {eta}: error {coarse:e} too small to measure");
        assert!(coarse / fine >= 8.0, "eta {eta}: ratio {}", coarse / fine);
    }
}

#[test]
fn disk_characteristics_are_straight_rays() {
    let cfg = ScenarioConfig::preset("eikonal-disk").unwrap();
    for eta in [0.0, 1.0, 2.5] {
        let z = terminal(&cfg, 1e-3, eta, 1.25);
        let (c, s) = (f64::cos(eta), f64::sin(eta));
        assert!(dist(&z[..2], &[2.25 * c, 2.25 * s]) < 1e-12);
        assert!(dist(&z[2..4], &[c, s]) < 1e-12);
    }
}

#[test]
fn annulus_focus_and_disk_without_conjugate_points() {
    let ann = ScenarioConfig::preset("eikonal-annulus").unwrap();
    let (model, geom) = (ann.model().unwrap(), ann.geometry().unwrap());
    let flow = Characteristics::new(&model, &geom, FlowOptions { t_max: 2.0, ..ann.flow.clone() }).unwrap();
    let det = ConjugateDetector::new(&flow, ann.conjugate.clone());
    let rec = flow.variational_flow(0, &[1.0]).unwrap();
    let t = det.detect_by_det(&rec).unwrap().conjugate_time.unwrap();
    assert!((t - 1.0).abs() <= 1e-3, "{t}");
    let outer = flow.variational_flow(1, &[1.0]).unwrap();
    assert!(det.detect_by_det(&outer).unwrap().conjugate_time.is_none());
}

#[test]
fn zermelo_field_matches_closed_form() {
    // With current h = (0.5, 0), the ray from xi with costate nu has velocity nu - h, so
    // x = xi + s (nu - h) reached backward in time s.
    let cfg = ScenarioConfig::preset("zermelo").unwrap();
    let (model, geom) = (cfg.model().unwrap(), cfg.geometry().unwrap());
    let field = MinTimeField::build(&model, &geom, &cfg.flow, &cfg.conjugate, cfg.field.clone()).unwrap();
    for (theta, s) in [(0.0_f64, 0.7), (1.5, 1.2), (3.0, 0.4), (4.5, 1.0)] {
        let nu = vector(&[theta.cos(), theta.sin()]);
        let x = &nu + (&nu - vector(&[0.5, 0.0])) * s;
        let v = field.eval(&x).unwrap();
        assert!((v.t - s).abs() < 1e-6, "theta {theta}: T = {} vs {s}", v.t);
        let expected = &nu / (1.0 - 0.5 * nu[0]);
        assert!((&v.grad - &expected).norm() < 1e-5, "theta {theta}: {:?}", v.grad);
    }
}

#[test]
fn grid_oracle_examples() {
    let disk = ScenarioConfig::preset("eikonal-disk").unwrap();
    let grid = HjbGrid::solve(&disk.model().unwrap(), &disk.geometry().unwrap(), &disk.grid).unwrap();
    assert!((grid.value_at(&vector(&[2.0, 0.0])).unwrap() - 1.0).abs() <= 0.03);
    assert_eq!(grid.value_at(&vector(&[0.3, -0.4])), Some(0.0));
    assert_eq!(grid.stats.increases, 0);

    let ann = ScenarioConfig::preset("eikonal-annulus").unwrap();
    let opts = GridOptions { ..ann.grid.clone() };
    let grid = HjbGrid::solve(&ann.model().unwrap(), &ann.geometry().unwrap(), &opts).unwrap();
    assert!((grid.value_at(&vector(&[0.5, 0.0])).unwrap() - 0.5).abs() <= 0.03);
    assert!((grid.value_at(&vector(&[0.0, 0.0])).unwrap() - 1.0).abs() <= 0.05);
    assert_eq!(grid.value_at(&vector(&[1.5, 0.0])), Some(0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hamiltonian_is_conserved_on_the_curved_system(eta in 0.0..std::f64::consts::TAU, s in 0.1..1.5f64) {
        let cfg = ScenarioConfig::from_toml(CURVED).unwrap();
        let model = cfg.model().unwrap();
        let z = terminal(&cfg, 1e-2, eta, s);
        let h = model.eval(&vector(&z[..2]), &vector(&z[2..4])).unwrap();
        prop_assert!((h - 1.0).abs() < 1e-8, "H = {}", h);
    }
}
