//! C² target boundaries: charts, signed distance, terminal costate and the
//! Petrov test.

use std::f64::consts::{FRAC_PI_4, TAU};
use std::fmt;
use std::sync::Arc;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hamiltonian::HamiltonianModel;
use crate::linalg::{singular_values_ascending, Matrix, Vector};

pub const DEFAULT_DELTA_MIN: f64 = 1e-3;
const ON_BOUNDARY_TOL: f64 = 1e-8;

/// Local parameterization `phi: A -> R^n` of one piece of the boundary.
pub trait BoundaryChart: Send + Sync + fmt::Debug {
    fn n(&self) -> usize;

    /// Connected component of the boundary this chart lies on.
    fn component(&self) -> usize;

    /// Parameter box, one `(lo, hi)` per axis.
    fn domain(&self) -> Vec<(f64, f64)>;

    fn periodic(&self) -> Vec<bool>;

    fn point(&self, eta: &[f64]) -> Vector;

    /// `n x (n-1)` matrix of tangent columns.
    fn jacobian(&self, eta: &[f64]) -> Matrix;

    /// Per output component, the `(n-1) x (n-1)` Hessian in `eta`.
    fn hessians(&self, eta: &[f64]) -> Vec<Matrix>;
}

/// Signed distance `b_K` (negative inside `K`) with derivatives.
pub trait SignedDistance: Send + Sync + fmt::Debug {
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
    fn hessian(&self, x: &Vector) -> Matrix;
}

/// Circle in the plane, `phi(theta) = c + r (cos theta, sin theta)`.
#[derive(Debug, Clone)]
pub struct CircleChart {
    pub center: [f64; 2],
    pub radius: f64,
    pub component: usize,
}

impl BoundaryChart for CircleChart {
    fn n(&self) -> usize {
        2
    }
    fn component(&self) -> usize {
        self.component
    }
    fn domain(&self) -> Vec<(f64, f64)> {
        vec![(0.0, TAU)]
    }
    fn periodic(&self) -> Vec<bool> {
        vec![true]
    }
    fn point(&self, eta: &[f64]) -> Vector {
        let (s, c) = eta[0].sin_cos();
        Vector::from_vec(vec![self.center[0] + self.radius * c, self.center[1] + self.radius * s])
    }
    fn jacobian(&self, eta: &[f64]) -> Matrix {
        let (s, c) = eta[0].sin_cos();
        Matrix::from_column_slice(2, 1, &[-self.radius * s, self.radius * c])
    }
    fn hessians(&self, eta: &[f64]) -> Vec<Matrix> {
        let (s, c) = eta[0].sin_cos();
        vec![Matrix::from_element(1, 1, -self.radius * c), Matrix::from_element(1, 1, -self.radius * s)]
    }
}

/// Ellipse `c + (a cos theta, b sin theta)`.
#[derive(Debug, Clone)]
pub struct EllipseChart {
    pub center: [f64; 2],
    pub radii: [f64; 2],
}

impl BoundaryChart for EllipseChart {
    fn n(&self) -> usize {
        2
    }
    fn component(&self) -> usize {
        0
    }
    fn domain(&self) -> Vec<(f64, f64)> {
        vec![(0.0, TAU)]
    }
    fn periodic(&self) -> Vec<bool> {
        vec![true]
    }
    fn point(&self, eta: &[f64]) -> Vector {
        let (s, c) = eta[0].sin_cos();
        Vector::from_vec(vec![self.center[0] + self.radii[0] * c, self.center[1] + self.radii[1] * s])
    }
    fn jacobian(&self, eta: &[f64]) -> Matrix {
        let (s, c) = eta[0].sin_cos();
        Matrix::from_column_slice(2, 1, &[-self.radii[0] * s, self.radii[1] * c])
    }
    fn hessians(&self, eta: &[f64]) -> Vec<Matrix> {
        let (s, c) = eta[0].sin_cos();
        vec![Matrix::from_element(1, 1, -self.radii[0] * c), Matrix::from_element(1, 1, -self.radii[1] * s)]
    }
}

/// Spherical band `|polar - pi/2| <= pi/4` around a coordinate axis of a sphere in `R^3`.
/// Two bands with axes `z` and `x` cover the whole sphere.
#[derive(Debug, Clone)]
pub struct SphereBandChart {
    pub center: [f64; 3],
    pub radius: f64,
    /// Index of the polar axis; the remaining two axes follow cyclically.
    pub axis: usize,
}

impl SphereBandChart {
    fn embed(&self, local: [f64; 3]) -> Vector {
        // local = (u, v, w) with w along the polar axis.
        let a = self.axis;
        let mut out = [0.0; 3];
        out[(a + 1) % 3] = local[0];
        out[(a + 2) % 3] = local[1];
        out[a] = local[2];
        Vector::from_vec(out.to_vec())
    }
}

impl BoundaryChart for SphereBandChart {
    fn n(&self) -> usize {
        3
    }
    fn component(&self) -> usize {
        0
    }
    fn domain(&self) -> Vec<(f64, f64)> {
        vec![(FRAC_PI_4, 3.0 * FRAC_PI_4), (0.0, TAU)]
    }
    fn periodic(&self) -> Vec<bool> {
        vec![false, true]
    }
    fn point(&self, eta: &[f64]) -> Vector {
        let (st, ct) = eta[0].sin_cos();
        let (sp, cp) = eta[1].sin_cos();
        let r = self.radius;
        self.embed([r * st * cp, r * st * sp, r * ct]) + Vector::from_column_slice(&self.center)
    }
    fn jacobian(&self, eta: &[f64]) -> Matrix {
        let (st, ct) = eta[0].sin_cos();
        let (sp, cp) = eta[1].sin_cos();
        let r = self.radius;
        let d_theta = self.embed([r * ct * cp, r * ct * sp, -r * st]);
        let d_phi = self.embed([-r * st * sp, r * st * cp, 0.0]);
        Matrix::from_columns(&[d_theta, d_phi])
    }
    fn hessians(&self, eta: &[f64]) -> Vec<Matrix> {
        let (st, ct) = eta[0].sin_cos();
        let (sp, cp) = eta[1].sin_cos();
        let r = self.radius;
        let tt = self.embed([-r * st * cp, -r * st * sp, -r * ct]);
        let tp = self.embed([-r * ct * sp, r * ct * cp, 0.0]);
        let pp = self.embed([-r * st * cp, -r * st * sp, 0.0]);
        (0..3).map(|k| Matrix::from_row_slice(2, 2, &[tt[k], tp[k], tp[k], pp[k]])).collect()
    }
}

/// `b(x) = |x - c| - r`.
#[derive(Debug, Clone)]
pub struct BallDistance {
    pub center: Vector,
    pub radius: f64,
}

impl SignedDistance for BallDistance {
    fn value(&self, x: &Vector) -> f64 {
        (x - &self.center).norm() - self.radius
    }
    fn gradient(&self, x: &Vector) -> Vector {
        let d = x - &self.center;
        let r = d.norm();
        d / r
    }
    fn hessian(&self, x: &Vector) -> Matrix {
        let d = x - &self.center;
        let r = d.norm();
        let u = &d / r;
        (Matrix::identity(d.len(), d.len()) - &u * u.transpose()) / r
    }
}

/// Planar annulus `r1 <= |x - c| <= r2`: `b = max(r1 - |x - c|, |x - c| - r2)`.
#[derive(Debug, Clone)]
pub struct AnnulusDistance {
    pub center: Vector,
    pub inner: f64,
    pub outer: f64,
}

impl AnnulusDistance {
    fn sign(&self, x: &Vector) -> f64 {
        let r = (x - &self.center).norm();
        if r - self.outer >= self.inner - r {
            1.0
        } else {
            -1.0
        }
    }
}

impl SignedDistance for AnnulusDistance {
    fn value(&self, x: &Vector) -> f64 {
        let r = (x - &self.center).norm();
        (self.inner - r).max(r - self.outer)
    }
    fn gradient(&self, x: &Vector) -> Vector {
        let d = x - &self.center;
        let r = d.norm();
        d * (self.sign(x) / r)
    }
    fn hessian(&self, x: &Vector) -> Matrix {
        let d = x - &self.center;
        let r = d.norm();
        let u = &d / r;
        (Matrix::identity(2, 2) - &u * u.transpose()) * (self.sign(x) / r)
    }
}

/// Signed distance to an axis-aligned ellipse via the nearest foot point.
#[derive(Debug, Clone)]
pub struct EllipseDistance {
    pub center: [f64; 2],
    pub radii: [f64; 2],
}

struct Foot {
    dist: f64,
    normal: [f64; 2],
    tangent: [f64; 2],
    curvature: f64,
}

impl EllipseDistance {
    fn foot(&self, x: &Vector) -> Foot {
        let [a, b] = self.radii;
        let px = x[0] - self.center[0];
        let py = x[1] - self.center[1];
        let resid = |t: f64| {
            let (s, c) = t.sin_cos();
            let dx = px - a * c;
            let dy = py - b * s;
            // derivative of the squared distance / 2, and its derivative.
            let g = dx * a * s - dy * b * c;
            let gp = a * a * s * s + dx * a * c + b * b * c * c + dy * b * s;
            (g, gp, dx * dx + dy * dy)
        };
        let mut best = 0.0;
        let mut best_d = f64::INFINITY;
        for k in 0..64 {
            let t = TAU * k as f64 / 64.0;
            let d = resid(t).2;
            if d < best_d {
                best_d = d;
                best = t;
            }
        }
        let mut t = best;
        for _ in 0..50 {
            let (g, gp, _) = resid(t);
            if gp.abs() < 1e-300 {
                break;
            }
            let dt = (g / gp).clamp(-0.1, 0.1);
            t -= dt;
            if dt.abs() < 1e-15 {
                break;
            }
        }
        let (s, c) = t.sin_cos();
        let tx = -a * s;
        let ty = b * c;
        let tl = tx.hypot(ty);
        let tangent = [tx / tl, ty / tl];
        let normal = [ty / tl, -tx / tl];
        let curvature = a * b / tl.powi(3);
        let dx = px - a * c;
        let dy = py - b * s;
        let inside = (px / a).powi(2) + (py / b).powi(2) < 1.0;
        let dist = dx.hypot(dy) * if inside { -1.0 } else { 1.0 };
        Foot { dist, normal, tangent, curvature }
    }
}

impl SignedDistance for EllipseDistance {
    fn value(&self, x: &Vector) -> f64 {
        self.foot(x).dist
    }
    fn gradient(&self, x: &Vector) -> Vector {
        let f = self.foot(x);
        Vector::from_column_slice(&f.normal)
    }
    fn hessian(&self, x: &Vector) -> Matrix {
        let f = self.foot(x);
        let t = Vector::from_column_slice(&f.tangent);
        &t * t.transpose() * (f.curvature / (1.0 + f.curvature * f.dist))
    }
}

/// Target `K = {b <= 0}` with charts covering its boundary.
#[derive(Debug, Clone)]
pub struct TargetGeometry {
    charts: Vec<Arc<dyn BoundaryChart>>,
    distance: Arc<dyn SignedDistance>,
    tube_width: f64,
    delta_min: f64,
}

impl TargetGeometry {
    pub fn new(
        charts: Vec<Arc<dyn BoundaryChart>>,
        distance: Arc<dyn SignedDistance>,
        tube_width: f64,
    ) -> Result<Self> {
        if charts.is_empty() {
            return Err(Error::InvalidInput("target needs at least one chart".into()));
        }
        let n = charts[0].n();
        if charts.iter().any(|c| c.n() != n) {
            return Err(Error::InvalidInput("charts disagree on the ambient dimension".into()));
        }
        if !(tube_width > 0.0) {
            return Err(Error::InvalidInput(format!("tube width must be positive, got {tube_width}")));
        }
        Ok(Self { charts, distance, tube_width, delta_min: DEFAULT_DELTA_MIN })
    }

    pub fn with_delta_min(mut self, delta_min: f64) -> Self {
        self.delta_min = delta_min;
        self
    }

    pub fn disk(center: [f64; 2], radius: f64) -> Result<Self> {
        Self::new(
            vec![Arc::new(CircleChart { center, radius, component: 0 })],
            Arc::new(BallDistance { center: Vector::from_column_slice(&center), radius }),
            0.5 * radius,
        )
    }

    pub fn annulus(center: [f64; 2], inner: f64, outer: f64) -> Result<Self> {
        if !(0.0 < inner && inner < outer) {
            return Err(Error::InvalidInput(format!("annulus radii must satisfy 0 < r1 < r2, got {inner}, {outer}")));
        }
        Self::new(
            vec![
                Arc::new(CircleChart { center, radius: inner, component: 0 }),
                Arc::new(CircleChart { center, radius: outer, component: 1 }),
            ],
            Arc::new(AnnulusDistance { center: Vector::from_column_slice(&center), inner, outer }),
            0.5f64.min(0.5 * (outer - inner)),
        )
    }

    pub fn ellipse(center: [f64; 2], radii: [f64; 2]) -> Result<Self> {
        if radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidInput("ellipse radii must be positive".into()));
        }
        let min_curv_radius = radii[0].min(radii[1]).powi(2) / radii[0].max(radii[1]);
        Self::new(
            vec![Arc::new(EllipseChart { center, radii })],
            Arc::new(EllipseDistance { center, radii }),
            0.5 * min_curv_radius,
        )
    }

    pub fn sphere(center: [f64; 3], radius: f64) -> Result<Self> {
        Self::new(
            vec![
                Arc::new(SphereBandChart { center, radius, axis: 2 }),
                Arc::new(SphereBandChart { center, radius, axis: 0 }),
            ],
            Arc::new(BallDistance { center: Vector::from_column_slice(&center), radius }),
            0.5 * radius,
        )
    }

    pub fn with_tube_width(mut self, width: f64) -> Self {
        self.tube_width = width;
        self
    }

    pub fn n(&self) -> usize {
        self.charts[0].n()
    }

    pub fn charts(&self) -> &[Arc<dyn BoundaryChart>] {
        &self.charts
    }

    pub fn chart(&self, id: usize) -> Result<&dyn BoundaryChart> {
        self.charts
            .get(id)
            .map(|c| c.as_ref())
            .ok_or_else(|| Error::InvalidInput(format!("chart {id} does not exist ({} charts)", self.charts.len())))
    }

    pub fn tube_width(&self) -> f64 {
        self.tube_width
    }

    pub fn delta_min(&self) -> f64 {
        self.delta_min
    }

    pub fn signed_distance(&self, x: &Vector) -> f64 {
        self.distance.value(x)
    }

    pub fn distance_gradient(&self, x: &Vector) -> Vector {
        self.distance.gradient(x)
    }

    pub fn distance_hessian(&self, x: &Vector) -> Matrix {
        self.distance.hessian(x)
    }

    pub fn contains(&self, x: &Vector) -> bool {
        self.distance.value(x) <= 0.0
    }

    /// `g(xi) = grad b(xi) / H(xi, grad b(xi))`.
    pub fn terminal_costate(&self, model: &HamiltonianModel, xi: &Vector) -> Result<Vector> {
        let (nu, h) = self.normal_and_speed(model, xi)?;
        Ok(nu / h)
    }

    fn normal_and_speed(&self, model: &HamiltonianModel, xi: &Vector) -> Result<(Vector, f64)> {
        let b = self.signed_distance(xi);
        if b.abs() > ON_BOUNDARY_TOL {
            return Err(Error::InvalidInput(format!("point {:?} is off the boundary (b = {b:.3e})", xi.as_slice())));
        }
        let nu = self.distance_gradient(xi);
        let h = model.eval(xi, &nu)?;
        if h <= self.delta_min {
            return Err(Error::PetrovFailure { point: xi.iter().copied().collect(), value: h, threshold: self.delta_min });
        }
        Ok((nu, h))
    }

    /// Jacobian of `eta -> g(phi(eta))`.
    pub fn terminal_costate_jacobian(&self, model: &HamiltonianModel, chart: usize, eta: &[f64]) -> Result<Matrix> {
        let ch = self.chart(chart)?;
        let xi = ch.point(eta);
        let (nu, h) = self.normal_and_speed(model, &xi)?;
        let d = model.derivatives(&xi, &nu, false)?;
        let hess_b = self.distance_hessian(&xi);
        let dh = &d.grad_x + &hess_b * &d.grad_p;
        let dg = &hess_b / h - &nu * dh.transpose() / (h * h);
        Ok(dg * ch.jacobian(eta))
    }

    /// Evaluate `H(xi, grad b(xi))` on boundary samples and compare with `delta`.
    pub fn petrov_check(&self, model: &HamiltonianModel, sample_count: usize, delta: f64) -> Result<PetrovReport> {
        if sample_count == 0 {
            return Err(Error::InvalidInput("petrov_check needs at least one sample".into()));
        }
        let mut min_value = f64::INFINITY;
        let mut argmin = Vector::zeros(self.n());
        let samples = self.boundary_samples(sample_count);
        for s in &samples {
            let nu = self.distance_gradient(&s.xi);
            let v = model.eval(&s.xi, &nu)?;
            if v < min_value {
                min_value = v;
                argmin = s.xi.clone();
            }
        }
        Ok(PetrovReport { min_value, argmin, delta, samples: samples.len(), pass: min_value >= delta })
    }

    /// Samples uniform in chart parameters, `count` per chart. Periodic axes start at the
    /// domain's lower end; bounded axes use cell midpoints.
    pub fn boundary_samples(&self, count: usize) -> Vec<BoundarySample> {
        let mut out = Vec::new();
        for (id, ch) in self.charts.iter().enumerate() {
            let dom = ch.domain();
            let per = ch.periodic();
            let axes = dom.len();
            let k = if axes == 1 { count } else { (count as f64).powf(1.0 / axes as f64).ceil() as usize };
            let k = k.max(1);
            let total = k.pow(axes as u32);
            for flat in 0..total {
                let mut rem = flat;
                let mut eta = vec![0.0; axes];
                for a in 0..axes {
                    let i = rem % k;
                    rem /= k;
                    let (lo, hi) = dom[a];
                    let off = if per[a] { 0.0 } else { 0.5 };
                    eta[a] = lo + (hi - lo) * (i as f64 + off) / k as f64;
                }
                let xi = ch.point(&eta);
                out.push(BoundarySample { chart: id, component: ch.component(), eta, xi });
            }
        }
        out
    }

    /// Structural checks on charts: full-rank tangents and points on `{b = 0}`.
    pub fn validate(&self, per_chart: usize) -> Result<()> {
        for s in self.boundary_samples(per_chart) {
            let ch = &self.charts[s.chart];
            let sv = singular_values_ascending(&ch.jacobian(&s.eta));
            if sv[0] <= 1e-8 {
                return Err(Error::InvalidInput(format!("chart {} degenerates at {:?}", s.chart, s.eta)));
            }
            let b = self.signed_distance(&s.xi);
            if b.abs() > 1e-10 {
                return Err(Error::InvalidInput(format!("chart {} leaves the boundary at {:?}: b = {b:.3e}", s.chart, s.eta)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySample {
    pub chart: usize,
    pub component: usize,
    pub eta: Vec<f64>,
    pub xi: Vector,
}

#[derive(Debug, Clone)]
pub struct PetrovReport {
    pub min_value: f64,
    pub argmin: Vector,
    pub delta: f64,
    pub samples: usize,
    pub pass: bool,
}

/// Config form of a built-in target.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub kind: TargetKind,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub radii: Option<Vec<f64>>,
    #[serde(default)]
    pub tube_width: Option<f64>,
    #[serde(default)]
    pub delta_min: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Disk,
    Ellipse,
    Annulus,
    Sphere,
}

impl TargetSpec {
    pub fn build(&self) -> Result<TargetGeometry> {
        let center = |n: usize| -> Result<Vec<f64>> {
            match &self.center {
                None => Ok(vec![0.0; n]),
                Some(c) if c.len() == n => Ok(c.clone()),
                Some(c) => Err(Error::Load(format!("target.center needs {n} entries, got {}", c.len()))),
            }
        };
        let radius = || self.radius.ok_or_else(|| Error::Load("target.radius is required".into()));
        let radii = |want: usize| -> Result<Vec<f64>> {
            match &self.radii {
                Some(r) if r.len() == want => Ok(r.clone()),
                Some(r) => Err(Error::Load(format!("target.radii needs {want} entries, got {}", r.len()))),
                None => Err(Error::Load("target.radii is required".into())),
            }
        };
        let mut geom = match self.kind {
            TargetKind::Disk => {
                let c = center(2)?;
                TargetGeometry::disk([c[0], c[1]], radius()?)?
            }
            TargetKind::Ellipse => {
                let c = center(2)?;
                let r = radii(2)?;
                TargetGeometry::ellipse([c[0], c[1]], [r[0], r[1]])?
            }
            TargetKind::Annulus => {
                let c = center(2)?;
                let r = radii(2)?;
                TargetGeometry::annulus([c[0], c[1]], r[0], r[1])?
            }
            TargetKind::Sphere => {
                let c = center(3)?;
                TargetGeometry::sphere([c[0], c[1], c[2]], radius()?)?
            }
        };
        if let Some(w) = self.tube_width {
            if !(w > 0.0) {
                return Err(Error::Load(format!("target.tube_width must be positive, got {w}")));
            }
            geom = geom.with_tube_width(w);
        }
        if let Some(d) = self.delta_min {
            geom = geom.with_delta_min(d);
        }
        Ok(geom)
    }
}
