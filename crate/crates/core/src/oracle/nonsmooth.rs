//! Numerical tests for proximal subgradients, Fréchet super- and
//! subgradients and semiconcavity of sampled scalar functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::MinTimeField;
use crate::linalg::Vector;
use crate::oracle::HjbGrid;

/// A scalar function that may be undefined at some points.
pub trait ScalarField {
    fn n(&self) -> usize;
    fn value(&self, x: &Vector) -> Option<f64>;
}

impl ScalarField for HjbGrid {
    fn n(&self) -> usize {
        self.dims.len()
    }

    fn value(&self, x: &Vector) -> Option<f64> {
        self.value_at(x)
    }
}

impl ScalarField for MinTimeField<'_> {
    fn n(&self) -> usize {
        MinTimeField::n(self)
    }

    fn value(&self, x: &Vector) -> Option<f64> {
        self.eval(x).ok().map(|v| v.t)
    }
}

/// Closure-backed field.
pub struct FnScalar<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&Vector) -> f64> FnScalar<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: Fn(&Vector) -> f64> ScalarField for FnScalar<F> {
    fn n(&self) -> usize {
        self.n
    }

    fn value(&self, x: &Vector) -> Option<f64> {
        Some((self.f)(x))
    }
}

/// `-f`.
pub struct Negated<'a, S: ?Sized>(pub &'a S);

impl<S: ScalarField + ?Sized> ScalarField for Negated<'_, S> {
    fn n(&self) -> usize {
        self.0.n()
    }

    fn value(&self, x: &Vector) -> Option<f64> {
        self.0.value(x).map(|v| -v)
    }
}

/// Allowance `abs + per_radius * |h|` for sampling noise in the data.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Slack {
    pub abs: f64,
    pub per_radius: f64,
}

impl Slack {
    pub const NONE: Slack = Slack { abs: 0.0, per_radius: 0.0 };

    /// Noise model for interpolated grid values with spacing `hgrid`.
    pub fn grid(hgrid: f64) -> Self {
        Self { abs: hgrid * hgrid, per_radius: GRID_GRADIENT_TOL }
    }

    pub fn at(&self, rho: f64) -> f64 {
        self.abs + self.per_radius * rho
    }
}

/// Accuracy of central-difference gradients of a converged grid.
pub const GRID_GRADIENT_TOL: f64 = 0.05;

/// Unit directions for probing: axes, diagonals and seeded random directions.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub directions: Vec<Vector>,
    pub levels: usize,
}

impl ProbeSet {
    pub const RANDOM_DIRECTIONS: usize = 64;
    pub const LEVELS: usize = 8;

    pub fn new(n: usize, seed: u64) -> Self {
        Self::with_counts(n, seed, Self::RANDOM_DIRECTIONS, Self::LEVELS)
    }

    pub fn with_counts(n: usize, seed: u64, random: usize, levels: usize) -> Self {
        let mut directions = Vec::new();
        for i in 0..n {
            for s in [1.0, -1.0] {
                let mut e = Vector::zeros(n);
                e[i] = s;
                directions.push(e);
            }
        }
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..n {
            for j in i + 1..n {
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let mut e = Vector::zeros(n);
                    e[i] = si * r;
                    e[j] = sj * r;
                    directions.push(e);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        directions.extend((0..random).map(|_| random_unit(n, &mut rng)));
        Self { directions, levels }
    }

    /// Probe displacements `(k / levels) * r * d` for `k = 1..=levels`.
    pub fn displacements(&self, r: f64) -> impl Iterator<Item = Vector> + '_ {
        (1..=self.levels).flat_map(move |k| {
            let rho = r * k as f64 / self.levels as f64;
            self.directions.iter().map(move |d| d * rho)
        })
    }
}

pub(crate) fn random_unit(n: usize, rng: &mut impl Rng) -> Vector {
    loop {
        let v = Vector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..=1.0)));
        let norm = v.norm();
        if norm > 0.1 && norm <= 1.0 {
            return v / norm;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProximalResult {
    pub pass: bool,
    /// Smallest `f(x+h) - f(x) - <p,h> + c|h|^2 + slack` over the probes.
    pub worst_margin: f64,
    pub worst_h: Option<Vector>,
    /// Smallest `c` for which the probes pass.
    pub required_c: f64,
    pub probes: usize,
    pub skipped: usize,
}

impl ProximalResult {
    pub fn partial(&self) -> bool {
        self.skipped > 0
    }
}

/// Checks `f(x+h) - f(x) >= <p,h> - c|h|^2` for `|h| <= r` over `probes`.
pub fn proximal_subgradient_test<S: ScalarField + ?Sized>(
    f: &S,
    x: &Vector,
    p: &Vector,
    c: f64,
    r: f64,
    probes: &ProbeSet,
    slack: Slack,
) -> ProximalResult {
    let mut res = ProximalResult {
        pass: false,
        worst_margin: f64::INFINITY,
        worst_h: None,
        required_c: 0.0,
        probes: 0,
        skipped: 0,
    };
    let Some(fx) = f.value(x) else {
        res.skipped = probes.directions.len() * probes.levels;
        return res;
    };
    for h in probes.displacements(r) {
        let Some(fy) = f.value(&(x + &h)) else {
            res.skipped += 1;
            continue;
        };
        res.probes += 1;
        let rho = h.norm();
        let base = fy - fx - p.dot(&h) + slack.at(rho);
        let margin = base + c * rho * rho;
        res.required_c = res.required_c.max(-base / (rho * rho));
        if margin < res.worst_margin {
            res.worst_margin = margin;
            res.worst_h = Some(h);
        }
    }
    res.pass = res.probes > 0 && res.worst_margin >= 0.0;
    res
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetOptions {
    /// Largest probe radius.
    pub radius: f64,
    /// Smallest probe radius.
    pub floor: f64,
    /// Allowed value of the extrapolated first-order remainder.
    pub tol: f64,
}

impl FrechetOptions {
    pub fn analytic(radius: f64) -> Self {
        Self { radius, floor: radius / 256.0, tol: 1e-3 }
    }

    pub fn grid(radius: f64, hgrid: f64) -> Self {
        Self { radius, floor: 2.0 * hgrid, tol: 2.0 * GRID_GRADIENT_TOL }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetResult {
    pub pass: bool,
    /// Extrapolated limit of the one-sided remainder quotient.
    pub estimate: f64,
    pub radii: Vec<f64>,
    pub quotients: Vec<f64>,
    pub skipped: usize,
}

/// `p` is a Fréchet supergradient: `limsup (f(y) - f(x) - <p,y-x>) / |y-x| <= 0`.
pub fn frechet_superdifferential_test<S: ScalarField + ?Sized>(
    f: &S,
    x: &Vector,
    p: &Vector,
    opts: &FrechetOptions,
    probes: &ProbeSet,
) -> FrechetResult {
    frechet_test(f, x, p, opts, probes, 1.0)
}

/// `p` is a Fréchet subgradient: `liminf (f(y) - f(x) - <p,y-x>) / |y-x| >= 0`.
pub fn frechet_subdifferential_test<S: ScalarField + ?Sized>(
    f: &S,
    x: &Vector,
    p: &Vector,
    opts: &FrechetOptions,
    probes: &ProbeSet,
) -> FrechetResult {
    frechet_test(f, x, p, opts, probes, -1.0)
}

fn frechet_test<S: ScalarField + ?Sized>(
    f: &S,
    x: &Vector,
    p: &Vector,
    opts: &FrechetOptions,
    probes: &ProbeSet,
    sign: f64,
) -> FrechetResult {
    let mut res = FrechetResult { pass: false, estimate: f64::INFINITY, radii: vec![], quotients: vec![], skipped: 0 };
    let Some(fx) = f.value(x) else {
        return res;
    };
    let mut rho = opts.radius;
    while rho >= opts.floor * (1.0 - 1e-12) {
        let mut q = f64::NEG_INFINITY;
        for d in &probes.directions {
            let h = d * rho;
            match f.value(&(x + &h)) {
                Some(fy) => q = q.max(sign * (fy - fx - p.dot(&h)) / rho),
                None => res.skipped += 1,
            }
        }
        if q.is_finite() {
            res.radii.push(rho);
            res.quotients.push(q);
        }
        rho *= 0.5;
    }
    let k = res.quotients.len();
    res.estimate = match k {
        0 => f64::INFINITY,
        1 => res.quotients[0],
        _ => {
            let (prev, last) = (res.quotients[k - 2], res.quotients[k - 1]);
            // Linear-in-radius remainder; never extrapolate below the smallest quotient seen.
            (2.0 * last - prev).max(last.min(prev))
        }
    };
    res.pass = res.estimate <= opts.tol;
    res
}

/// Sampling region for semiconcavity checks.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// `r_min <= |x - center| <= r_max`.
    Annulus { center: Vector, r_min: f64, r_max: f64 },
    /// `|x - center| <= radius`; the center is always included.
    Ball { center: Vector, radius: f64 },
    Points(Vec<Vector>),
}

impl Region {
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Vec<Vector> {
        match self {
            Region::Points(p) => p.clone(),
            Region::Annulus { center, r_min, r_max } => (0..count)
                .map(|_| {
                    let d = random_unit(center.len(), rng);
                    let r = rng.random_range(*r_min..=*r_max);
                    center + d * r
                })
                .collect(),
            Region::Ball { center, radius } => {
                let mut pts = vec![center.clone()];
                pts.extend((1..count).map(|_| {
                    let d = random_unit(center.len(), rng);
                    let r = radius * rng.random::<f64>().powf(1.0 / center.len() as f64);
                    center + d * r
                }));
                pts
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiconcavityResult {
    pub pass: bool,
    /// `(x, h, excess)` with the largest `D - c|h|^2 - slack`.
    pub worst: Option<(Vector, Vector, f64)>,
    /// Smallest `c` consistent with the samples and the slack.
    pub measured_c: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiconcavityOptions {
    pub points: usize,
    pub steps_per_point: usize,
    pub h_max: f64,
    pub slack: f64,
    pub seed: u64,
}

impl Default for SemiconcavityOptions {
    fn default() -> Self {
        Self { points: 100, steps_per_point: 8, h_max: 0.01, slack: 0.0, seed: 0 }
    }
}

/// Checks `f(x+h) + f(x-h) - 2 f(x) <= c|h|^2 + slack` on samples from `region`.
pub fn semiconcavity_check<S: ScalarField + ?Sized>(
    f: &S,
    region: &Region,
    c: f64,
    opts: &SemiconcavityOptions,
) -> SemiconcavityResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = f.n();
    let mut res = SemiconcavityResult { pass: false, worst: None, measured_c: 0.0, evaluated: 0, skipped: 0 };
    let mut worst = f64::NEG_INFINITY;
    for x in region.sample(opts.points, &mut rng) {
        for k in 0..opts.steps_per_point {
            // Alternate the full step with random shorter ones.
            let len = if k == 0 { opts.h_max } else { opts.h_max * rng.random_range(0.1..=1.0) };
            let h = random_unit(n, &mut rng) * len;
            let (Some(a), Some(b), Some(m)) = (f.value(&(&x + &h)), f.value(&(&x - &h)), f.value(&x)) else {
                res.skipped += 1;
                continue;
            };
            res.evaluated += 1;
            let d2 = a + b - 2.0 * m;
            let hh = len * len;
            res.measured_c = res.measured_c.max((d2 - opts.slack) / hh);
            let excess = d2 - c * hh - opts.slack;
            if excess > worst {
                worst = excess;
                res.worst = Some((x.clone(), h, excess));
            }
        }
    }
    res.pass = res.evaluated > 0 && worst <= 0.0;
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::vector;

    fn disk() -> FnScalar<impl Fn(&Vector) -> f64> {
        FnScalar::new(2, |x: &Vector| (x.norm() - 1.0).max(0.0))
    }

    fn annulus() -> FnScalar<impl Fn(&Vector) -> f64> {
        FnScalar::new(2, |x: &Vector| (1.0 - x.norm()).max(0.0))
    }

    #[test]
    fn probe_set_layout() {
        let p = ProbeSet::new(2, 7);
        assert_eq!(p.directions.len(), 4 + 4 + 64);
        assert!(p.directions.iter().all(|d| (d.norm() - 1.0).abs() < 1e-12));
        assert_eq!(p.displacements(1.0).count(), 72 * 8);
        let q = ProbeSet::new(2, 7);
        assert_eq!(p.directions, q.directions);
    }

    #[test]
    fn proximal_examples() {
        let probes = ProbeSet::new(2, 1);
        let x = vector(&[2.0, 0.0]);
        let ok = proximal_subgradient_test(&disk(), &x, &vector(&[1.0, 0.0]), 1.0, 0.2, &probes, Slack::NONE);
        assert!(ok.pass, "{ok:?}");
        assert!(ok.required_c <= 0.26);
        let bad = proximal_subgradient_test(&disk(), &x, &vector(&[1.2, 0.0]), 1.0, 0.2, &probes, Slack::NONE);
        assert!(!bad.pass);
        assert!(bad.worst_margin < 0.0);
        let focus = vector(&[0.0, 0.0]);
        for c in [1.0, 10.0, 100.0] {
            let r = proximal_subgradient_test(&annulus(), &focus, &vector(&[-1.0, 0.0]), c, 0.1, &probes, Slack::NONE);
            assert!(!r.pass, "c = {c}");
        }
    }

    #[test]
    fn proximal_reports_skipped_probes() {
        let f = FnScalar::new(1, |x: &Vector| x[0]);
        struct Half<'a, S>(&'a S);
        impl<S: ScalarField> ScalarField for Half<'_, S> {
            fn n(&self) -> usize {
                1
            }
            fn value(&self, x: &Vector) -> Option<f64> {
                if x[0] > 0.5 { None } else { self.0.value(x) }
            }
        }
        let r = proximal_subgradient_test(&Half(&f), &vector(&[0.45]), &vector(&[1.0]), 0.1, 0.1, &ProbeSet::new(1, 0), Slack::NONE);
        assert!(r.partial());
        assert!(r.pass);
    }

    #[test]
    fn frechet_examples() {
        let probes = ProbeSet::new(2, 3);
        let x = vector(&[2.0, 0.0]);
        let opts = FrechetOptions::analytic(0.2);
        assert!(frechet_superdifferential_test(&disk(), &x, &vector(&[1.0, 0.0]), &opts, &probes).pass);
        assert!(frechet_subdifferential_test(&disk(), &x, &vector(&[1.0, 0.0]), &opts, &probes).pass);
        let wrong = frechet_superdifferential_test(&disk(), &x, &vector(&[0.0, 1.0]), &opts, &probes);
        assert!(!wrong.pass);
        assert!(wrong.estimate > 1.0);
        let focus = vector(&[0.0, 0.0]);
        let sup = frechet_superdifferential_test(&annulus(), &focus, &vector(&[-1.0, 0.0]), &opts, &probes);
        assert!(sup.pass, "{sup:?}");
        assert!(frechet_superdifferential_test(&annulus(), &focus, &vector(&[0.0, 0.0]), &opts, &probes).pass);
        assert!(!frechet_subdifferential_test(&annulus(), &focus, &vector(&[-1.0, 0.0]), &opts, &probes).pass);
        assert!(!frechet_superdifferential_test(&annulus(), &focus, &vector(&[-1.5, 0.0]), &opts, &probes).pass);
    }

    #[test]
    fn semiconcavity_examples() {
        let opts = SemiconcavityOptions::default();
        let ring = Region::Annulus { center: vector(&[0.0, 0.0]), r_min: 1.2, r_max: 2.8 };
        let r = semiconcavity_check(&disk(), &ring, 1.0, &opts);
        assert!(r.pass, "{r:?}");
        assert!(r.measured_c <= 1.0 / 1.2 + 1e-6);
        let ball = Region::Ball { center: vector(&[0.0, 0.0]), radius: 0.9 };
        assert!(semiconcavity_check(&annulus(), &ball, 10.0, &opts).pass);
        let an = annulus();
        let neg = semiconcavity_check(&Negated(&an), &ball, 1.0, &opts);
        assert!(!neg.pass);
        let (x, _, _) = neg.worst.unwrap();
        assert!(x.norm() < 1e-12);
        // -T of the disk is concave, so it passes.
        let dk = disk();
        assert!(semiconcavity_check(&Negated(&dk), &ring, 1.0, &opts).pass);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn quadratic_gradient_is_a_proximal_subgradient(x in -2.0..2.0f64, y in -2.0..2.0f64, seed in 0u64..8) {
            let f = FnScalar::new(2, |v: &Vector| 0.5 * v.norm_squared());
            let at = vector(&[x, y]);
            let probes = ProbeSet::with_counts(2, seed, 16, 4);
            let ok = proximal_subgradient_test(&f, &at, &at, 0.0, 0.3, &probes, Slack::NONE);
            proptest::prop_assert!(ok.pass && ok.required_c <= 1e-9, "{:?}", ok);
            let shifted = proximal_subgradient_test(&f, &at, &(&at + vector(&[0.3, 0.0])), 0.5, 0.3, &probes, Slack::NONE);
            proptest::prop_assert!(!shifted.pass);
            let region = Region::Points(vec![at.clone()]);
            let opts = SemiconcavityOptions { steps_per_point: 4, seed, ..SemiconcavityOptions::default() };
            proptest::prop_assert!(semiconcavity_check(&f, &region, 1.0 + 1e-9, &opts).pass);
            proptest::prop_assert!(!semiconcavity_check(&f, &region, 0.9, &opts).pass);
        }
    }
}
