//! Propagation of proximal subgradients and differentiability along optimal
//! trajectories, and the conjugate-time C² certificate.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charflow::{fmt_f64, Level};
use crate::conjugate::{ConjugateDetector, ConjugateOptions};
use crate::error::{Error, Result};
use crate::field::{FieldValue, MinTimeField};
use crate::linalg::{sym_eigenvalues, Matrix, Vector};
use crate::oracle::nonsmooth::random_unit;
use crate::scenario::ScenarioConfig;
use crate::target::PetrovReport;
use crate::oracle::{
    frechet_subdifferential_test, frechet_superdifferential_test, proximal_subgradient_test, semiconcavity_check,
    FrechetOptions, HjbGrid, ProbeSet, Region, ScalarField, SemiconcavityOptions, Slack, SweepStats,
};

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Start point of the optimal trajectory.
    pub x0: Option<Vec<f64>>,
    pub samples: usize,
    /// Last sampled time; `None` uses `0.9 T(x0)`.
    pub t_end: Option<f64>,
    /// Uniform proximal constant; `None` uses the largest measured one.
    pub c: Option<f64>,
    /// Largest proximal constant accepted as finite.
    pub c_max: f64,
    pub radius: f64,
    pub frechet_radius: f64,
    pub perturbation: f64,
    pub tube_radius: f64,
    pub tube_points: usize,
    pub fd_step: f64,
    pub fd_tol: f64,
    pub symmetry_tol: f64,
    pub sandwich_slack: f64,
    /// Checked horizon for the certificate; `None` uses `T(x0)`.
    pub horizon_override: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            x0: None,
            samples: 10,
            t_end: None,
            c: None,
            c_max: 50.0,
            radius: 0.1,
            frechet_radius: 0.2,
            perturbation: 0.2,
            tube_radius: 0.01,
            tube_points: 4,
            fd_step: 1e-4,
            fd_tol: 1e-2,
            symmetry_tol: 1e-6,
            sandwich_slack: 0.1,
            horizon_override: None,
        }
    }
}

impl VerifyOptions {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::InvalidInput("verify.samples must be at least 2".into()));
        }
        for (k, v) in [
            ("c_max", self.c_max),
            ("radius", self.radius),
            ("frechet_radius", self.frechet_radius),
            ("perturbation", self.perturbation),
            ("tube_radius", self.tube_radius),
            ("fd_step", self.fd_step),
            ("fd_tol", self.fd_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("verify.{k} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn start(&self) -> Result<Vector> {
        self.x0
            .as_ref()
            .map(|v| Vector::from_column_slice(v))
            .ok_or_else(|| Error::InvalidInput("verify.x0 is required".into()))
    }
}

/// Sampled values of `T` together with the noise model used by the predicates.
pub struct Oracle<'g> {
    pub values: &'g dyn ScalarField,
    pub slack: Slack,
    pub frechet_floor: f64,
    pub frechet_tol: f64,
    /// Step for central-difference gradients.
    pub gradient_step: f64,
}

impl<'g> Oracle<'g> {
    pub fn grid(grid: &'g HjbGrid) -> Self {
        let f = FrechetOptions::grid(1.0, grid.h);
        Self {
            values: grid,
            slack: Slack::grid(grid.h),
            frechet_floor: f.floor,
            frechet_tol: f.tol,
            gradient_step: grid.h,
        }
    }

    pub fn exact(values: &'g dyn ScalarField) -> Self {
        Self {
            values,
            slack: Slack::NONE,
            frechet_floor: 1e-3,
            frechet_tol: 1e-3,
            gradient_step: 1e-5,
        }
    }

    fn frechet(&self, radius: f64) -> FrechetOptions {
        FrechetOptions { radius, floor: self.frechet_floor.min(radius), tol: self.frechet_tol }
    }

    /// Central-difference gradient.
    pub fn gradient(&self, x: &Vector) -> Option<Vector> {
        let n = x.len();
        let d = self.gradient_step;
        let mut g = Vector::zeros(n);
        for i in 0..n {
            let mut e = Vector::zeros(n);
            e[i] = d;
            g[i] = (self.values.value(&(x + &e))? - self.values.value(&(x - &e))?) / (2.0 * d);
        }
        Some(g)
    }
}

/// A point `x(t)` on the optimal trajectory with its dual arc value.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vector,
    pub p: Vector,
}

/// Start value and `samples` equally spaced points of the optimal trajectory through `x0` on `[0, t_end]`.
pub fn trajectory_points(
    field: &MinTimeField,
    x0: &Vector,
    samples: usize,
    t_end: Option<f64>,
) -> Result<(FieldValue, Vec<TrajectoryPoint>)> {
    let v = field.eval(x0)?;
    if v.inside_target {
        return Err(Error::InvalidInput("x0 lies in the target".into()));
    }
    let t_end = t_end.unwrap_or(0.9 * v.t);
    if !(0.0..=v.t).contains(&t_end) {
        return Err(Error::InvalidInput(format!("t_end = {t_end} outside [0, T(x0) = {}]", v.t)));
    }
    let flow = field.characteristics();
    let lay = flow.layout(Level::Flow);
    let scale = flow.opts.costate_scale;
    let mut pts = Vec::with_capacity(samples);
    for k in 0..samples {
        let t = t_end * k as f64 / (samples - 1).max(1) as f64;
        let (x, p) = if k == 0 {
            (x0.clone(), v.grad.clone())
        } else {
            let z = flow.state_at(v.chart, &v.eta, v.t - t, Level::Flow)?;
            (Vector::from_column_slice(&z[lay.y()]), Vector::from_column_slice(&z[lay.p()]) / scale)
        };
        pts.push(TrajectoryPoint { t, x, p });
    }
    Ok((v, pts))
}

/// `p + perturbation * d` over axis and diagonal unit directions `d`.
pub fn perturbed_candidates(p: &Vector, perturbation: f64) -> Vec<Vector> {
    ProbeSet::with_counts(p.len(), 0, 0, 1).directions.iter().map(|d| p + d * perturbation).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgradientSample {
    pub point: TrajectoryPoint,
    pub required_c: f64,
    pub margin: f64,
    pub pass: bool,
    pub partial: bool,
    /// Perturbed candidates that still pass with the uniform constant.
    pub perturbed_passing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgradientReport {
    pub x0: Vector,
    pub duration: f64,
    pub c: f64,
    pub r: f64,
    pub precondition: bool,
    pub samples: Vec<SubgradientSample>,
    pub pass: bool,
}

/// Proximal subgradient test at every sampled `(x(t), p(t))` with one constant `c` and radius `r`.
pub fn subgradient_propagation(
    field: &MinTimeField,
    oracle: &Oracle,
    opts: &VerifyOptions,
) -> Result<SubgradientReport> {
    opts.validate()?;
    let x0 = opts.start()?;
    let (v, pts) = trajectory_points(field, &x0, opts.samples, opts.t_end)?;
    let probes = ProbeSet::new(x0.len(), opts.seed);
    let r = opts.radius;
    let first: Vec<_> = pts
        .iter()
        .map(|pt| proximal_subgradient_test(oracle.values, &pt.x, &pt.p, 0.0, r, &probes, oracle.slack))
        .collect();
    let measured = first.iter().fold(0.0_f64, |a, t| a.max(t.required_c));
    let c = opts.c.unwrap_or(measured * (1.0 + 1e-9) + 1e-12);
    let mut samples = Vec::with_capacity(pts.len());
    for pt in pts {
        let t = proximal_subgradient_test(oracle.values, &pt.x, &pt.p, c, r, &probes, oracle.slack);
        let perturbed_passing = perturbed_candidates(&pt.p, opts.perturbation)
            .iter()
            .filter(|q| proximal_subgradient_test(oracle.values, &pt.x, q, c, r, &probes, oracle.slack).pass)
            .count();
        samples.push(SubgradientSample {
            required_c: t.required_c,
            margin: t.worst_margin,
            pass: t.pass,
            partial: t.partial(),
            perturbed_passing,
            point: pt,
        });
    }
    let precondition = samples[0].pass && c <= opts.c_max;
    let pass = precondition && samples.iter().all(|s| s.pass);
    Ok(SubgradientReport { x0, duration: v.t, c, r, precondition, samples, pass })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiabilitySample {
    pub point: TrajectoryPoint,
    pub sup_estimate: f64,
    pub sub_estimate: f64,
    pub pass: bool,
    /// Perturbed candidates that pass both one-sided tests.
    pub perturbed_passing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferentiabilityReport {
    pub x0: Vector,
    pub duration: f64,
    /// `H(xi, grad b(xi))` at the trajectory endpoint.
    pub petrov_value: f64,
    pub precondition: bool,
    pub samples: Vec<DifferentiabilitySample>,
    pub uniqueness: bool,
    pub pass: bool,
}

/// Fréchet super- and subgradient tests with `p = p(t)` and the perturbation uniqueness proxy.
pub fn differentiability_propagation(
    field: &MinTimeField,
    oracle: &Oracle,
    opts: &VerifyOptions,
) -> Result<DifferentiabilityReport> {
    opts.validate()?;
    let x0 = opts.start()?;
    let (v, pts) = trajectory_points(field, &x0, opts.samples, opts.t_end)?;
    let flow = field.characteristics();
    let xi = flow.geom.chart(v.chart)?.point(&v.eta);
    let nu = flow.geom.distance_gradient(&xi);
    let petrov_value = flow.model.eval(&xi, &nu)?;
    let probes = ProbeSet::new(x0.len(), opts.seed);
    let fo = oracle.frechet(opts.frechet_radius);
    let both = |x: &Vector, p: &Vector| {
        let sup = frechet_superdifferential_test(oracle.values, x, p, &fo, &probes);
        let sub = frechet_subdifferential_test(oracle.values, x, p, &fo, &probes);
        (sup, sub)
    };
    let mut samples = Vec::with_capacity(pts.len());
    for pt in pts {
        let (sup, sub) = both(&pt.x, &pt.p);
        let perturbed_passing = perturbed_candidates(&pt.p, opts.perturbation)
            .iter()
            .filter(|q| {
                let (a, b) = both(&pt.x, q);
                a.pass && b.pass
            })
            .count();
        samples.push(DifferentiabilitySample {
            sup_estimate: sup.estimate,
            sub_estimate: sub.estimate,
            pass: sup.pass && sub.pass,
            perturbed_passing,
            point: pt,
        });
    }
    let precondition = samples[0].pass && petrov_value > 0.0;
    let uniqueness = samples.iter().all(|s| s.perturbed_passing == 0);
    let pass = precondition && uniqueness && samples.iter().all(|s| s.pass);
    Ok(DifferentiabilityReport { x0, duration: v.t, petrov_value, precondition, samples, uniqueness, pass })
}

#[derive(Debug, Clone, PartialEq)]
pub enum CertificateStatus {
    Granted,
    Refused { t_bar: f64 },
    NotApplicable { reason: String },
}

impl CertificateStatus {
    pub fn name(&self) -> &'static str {
        match self {
            CertificateStatus::Granted => "granted",
            CertificateStatus::Refused { .. } => "refused",
            CertificateStatus::NotApplicable { .. } => "not-applicable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct C2Report {
    pub status: CertificateStatus,
    pub x0: Vector,
    pub chart: usize,
    pub eta: Vec<f64>,
    pub xi0: Vector,
    pub horizon: f64,
    /// `(criterion, conjugate time)` for each applicable detector.
    pub detectors: Vec<(&'static str, Option<f64>)>,
    pub t_bar: Option<f64>,
    /// `t_bar - horizon`.
    pub margin: Option<f64>,
    /// Proximal constant measured at `x0` on the oracle and field samples.
    pub c0: f64,
    /// Semiconcavity constant measured on the tube.
    pub semiconcavity_c: f64,
    pub tube_points: usize,
    pub tube_skipped: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub max_hessian_norm: f64,
    pub symmetric: bool,
    pub fd_max_error: f64,
    pub fd_ok: bool,
    /// Eigenvalues within `[-2 c0 - slack, C + slack]`.
    pub sandwich_ok: bool,
}

impl C2Report {
    fn not_applicable(x0: Vector, reason: String, c0: f64) -> Self {
        let n = x0.len();
        Self {
            status: CertificateStatus::NotApplicable { reason },
            x0,
            chart: 0,
            eta: vec![],
            xi0: Vector::zeros(n),
            horizon: 0.0,
            detectors: vec![],
            t_bar: None,
            margin: None,
            c0,
            semiconcavity_c: 0.0,
            tube_points: 0,
            tube_skipped: 0,
            min_eigenvalue: 0.0,
            max_eigenvalue: 0.0,
            max_hessian_norm: 0.0,
            symmetric: false,
            fd_max_error: 0.0,
            fd_ok: false,
            sandwich_ok: false,
        }
    }
}

/// Certifies that `T` is C² near the optimal trajectory through `x0`.
pub fn c2_certificate(
    field: &MinTimeField,
    oracle: &Oracle,
    conj: &ConjugateOptions,
    opts: &VerifyOptions,
) -> Result<C2Report> {
    opts.validate()?;
    let x0 = opts.start()?;
    let n = x0.len();
    let probes = ProbeSet::new(n, opts.seed);
    let value = field.eval(&x0);
    let candidate = match &value {
        Ok(v) => Some(v.grad.clone()),
        Err(_) => oracle.gradient(&x0),
    };
    let Some(p0) = candidate else {
        return Ok(C2Report::not_applicable(x0, "no gradient candidate at x0".into(), f64::INFINITY));
    };
    let prox = proximal_subgradient_test(oracle.values, &x0, &p0, 0.0, opts.radius, &probes, oracle.slack);
    let c0 = prox.required_c;
    if prox.probes == 0 || c0 > opts.c_max {
        let reason = format!("no proximal subgradient at x0: required c = {} exceeds {}", fmt_f64(c0), fmt_f64(opts.c_max));
        return Ok(C2Report::not_applicable(x0, reason, c0));
    }
    let v = match value {
        Ok(v) if v.inside_target => {
            return Ok(C2Report::not_applicable(x0, "x0 lies in the target".into(), c0));
        }
        Ok(v) => v,
        Err(e @ (Error::OutOfTube { .. } | Error::NoConvergence { .. })) => {
            return Ok(C2Report::not_applicable(x0, format!("field unavailable at x0: {e}"), c0));
        }
        Err(e) => return Err(e),
    };
    // Field samples carry no grid noise, so they bound the Hessian from below more sharply.
    let field_prox = proximal_subgradient_test(field, &x0, &v.grad, 0.0, opts.radius, &probes, Slack::NONE);
    let c0 = if field_prox.probes > 0 { c0.max(field_prox.required_c) } else { c0 };
    let flow = field.characteristics();
    let xi0 = flow.geom.chart(v.chart)?.point(&v.eta);
    let horizon = opts.horizon_override.unwrap_or(v.t);

    let det = ConjugateDetector::new(flow, conj.clone());
    let mut detectors = Vec::new();
    let var = flow.variational_flow(v.chart, &v.eta)?;
    detectors.push(("det", det.detect_by_det(&var)?.conjugate_time));
    let partial = flow.partial_variational_flow(v.chart, &v.eta)?;
    match det.detect_by_rank(&partial) {
        Ok(r) => detectors.push(("rank", r.conjugate_time)),
        Err(Error::H2Violation { .. }) => {}
        Err(e) => return Err(e),
    }
    let ric = flow.riccati_flow(v.chart, &v.eta)?;
    detectors.push(("riccati", det.detect_by_riccati(&ric)?.conjugate_time));
    let t_bar = detectors.iter().filter_map(|d| d.1).reduce(f64::min);

    // Tube around the trajectory.
    let (_, pts) = trajectory_points(field, &x0, opts.samples, Some(v.t))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tube = Vec::new();
    for pt in &pts {
        tube.push(pt.x.clone());
        for _ in 0..opts.tube_points {
            tube.push(&pt.x + random_unit(n, &mut rng) * opts.tube_radius);
        }
    }
    let mut evaluated = Vec::new();
    let mut skipped = 0;
    for x in &tube {
        match field.eval(x) {
            Ok(fv) if !fv.inside_target => evaluated.push((x.clone(), fv)),
            Ok(_) | Err(Error::OutOfTube { .. } | Error::NoConvergence { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut symmetric = !evaluated.is_empty();
    let (mut lo, mut hi, mut norm, mut fd_err) = (f64::INFINITY, f64::NEG_INFINITY, 0.0_f64, 0.0_f64);
    for (x, fv) in &evaluated {
        let h = &fv.hess;
        let scale = h.norm().max(1.0);
        if (h - h.transpose()).norm() > opts.symmetry_tol * scale {
            symmetric = false;
        }
        let eig = sym_eigenvalues(&(0.5 * (h + h.transpose())));
        lo = lo.min(eig.iter().copied().fold(f64::INFINITY, f64::min));
        hi = hi.max(eig.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        norm = norm.max(eig.iter().fold(0.0_f64, |a, e| a.max(e.abs())));
        fd_err = fd_err.max(hessian_fd_error(field, x, h, opts.fd_step)?);
    }
    let points: Vec<Vector> = evaluated.iter().map(|(x, _)| x.clone()).collect();
    let sc = semiconcavity_check(
        field,
        &Region::Points(points),
        0.0,
        &SemiconcavityOptions {
            points: 0,
            steps_per_point: 4,
            h_max: 0.5 * opts.tube_radius,
            slack: 1e-9,
            seed: opts.seed,
        },
    );
    let semiconcavity_c = sc.measured_c;
    let slack = opts.sandwich_slack * (1.0 + semiconcavity_c.abs().max(c0));
    let sandwich_ok = lo >= -2.0 * c0 - slack && hi <= semiconcavity_c + slack;
    let bounded = norm.is_finite() && norm < flow.opts.blowup_threshold;

    let status = match t_bar {
        Some(tb) if tb <= horizon + conj.loc_tol => CertificateStatus::Refused { t_bar: tb },
        _ if !symmetric || !bounded => CertificateStatus::NotApplicable {
            reason: "Hessian on the tube is not symmetric and bounded".into(),
        },
        _ => CertificateStatus::Granted,
    };
    Ok(C2Report {
        status,
        x0,
        chart: v.chart,
        eta: v.eta,
        xi0,
        horizon,
        detectors,
        t_bar,
        margin: t_bar.map(|tb| tb - horizon),
        c0,
        semiconcavity_c,
        tube_points: evaluated.len(),
        tube_skipped: skipped,
        min_eigenvalue: lo,
        max_eigenvalue: hi,
        max_hessian_norm: norm,
        symmetric,
        fd_max_error: fd_err,
        fd_ok: fd_err <= opts.fd_tol,
        sandwich_ok,
    })
}

/// Largest entry of `hess` minus central differences of the field gradient at `x`.
pub fn hessian_fd_error(field: &MinTimeField, x: &Vector, hess: &Matrix, step: f64) -> Result<f64> {
    let n = x.len();
    let mut err = 0.0_f64;
    for j in 0..n {
        let mut e = Vector::zeros(n);
        e[j] = step;
        let (Ok(a), Ok(b)) = (field.eval(&(x + &e)), field.eval(&(x - &e))) else {
            continue;
        };
        if a.inside_target || b.inside_target {
            continue;
        }
        let col = (a.grad - b.grad) / (2.0 * step);
        for i in 0..n {
            err = err.max((col[i] - hess[(i, j)]).abs());
        }
    }
    Ok(err)
}

fn vec_text(v: &Vector) -> String {
    format!("[{}]", v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", "))
}

impl SubgradientReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[subgradient_propagation]");
        let _ = writeln!(s, "pass = {}", self.pass);
        let _ = writeln!(s, "precondition = {}", self.precondition);
        let _ = writeln!(s, "x0 = {}", vec_text(&self.x0));
        let _ = writeln!(s, "duration = {}", fmt_f64(self.duration));
        let _ = writeln!(s, "c = {}", fmt_f64(self.c));
        let _ = writeln!(s, "r = {}", fmt_f64(self.r));
        let worst = self.samples.iter().map(|x| x.margin).fold(f64::INFINITY, f64::min);
        let _ = writeln!(s, "worst_margin = {}", fmt_f64(worst));
        let _ = writeln!(s, "perturbed_passing = {}", self.samples.iter().map(|x| x.perturbed_passing).sum::<usize>());
        s
    }

    /// Columns `t, x0.., p0.., required_c, margin, pass, partial, perturbed_passing`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.x0.len();
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["t".to_string()];
        head.extend((0..n).map(|i| format!("x{i}")));
        head.extend((0..n).map(|i| format!("p{i}")));
        head.extend(["required_c", "margin", "pass", "partial", "perturbed_passing"].map(String::from));
        w.write_record(&head)?;
        for r in &self.samples {
            let mut row = vec![fmt_f64(r.point.t)];
            row.extend(r.point.x.iter().chain(r.point.p.iter()).map(|v| fmt_f64(*v)));
            row.extend([
                fmt_f64(r.required_c),
                fmt_f64(r.margin),
                r.pass.to_string(),
                r.partial.to_string(),
                r.perturbed_passing.to_string(),
            ]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl DifferentiabilityReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[differentiability_propagation]");
        let _ = writeln!(s, "pass = {}", self.pass);
        let _ = writeln!(s, "precondition = {}", self.precondition);
        let _ = writeln!(s, "uniqueness = {}", self.uniqueness);
        let _ = writeln!(s, "x0 = {}", vec_text(&self.x0));
        let _ = writeln!(s, "duration = {}", fmt_f64(self.duration));
        let _ = writeln!(s, "petrov_value = {}", fmt_f64(self.petrov_value));
        let sup = self.samples.iter().map(|x| x.sup_estimate).fold(f64::NEG_INFINITY, f64::max);
        let sub = self.samples.iter().map(|x| x.sub_estimate).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(s, "worst_sup_remainder = {}", fmt_f64(sup));
        let _ = writeln!(s, "worst_sub_remainder = {}", fmt_f64(sub));
        s
    }

    /// Columns `t, x0.., p0.., sup, sub, pass, perturbed_passing`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.x0.len();
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["t".to_string()];
        head.extend((0..n).map(|i| format!("x{i}")));
        head.extend((0..n).map(|i| format!("p{i}")));
        head.extend(["sup", "sub", "pass", "perturbed_passing"].map(String::from));
        w.write_record(&head)?;
        for r in &self.samples {
            let mut row = vec![fmt_f64(r.point.t)];
            row.extend(r.point.x.iter().chain(r.point.p.iter()).map(|v| fmt_f64(*v)));
            row.extend([
                fmt_f64(r.sup_estimate),
                fmt_f64(r.sub_estimate),
                r.pass.to_string(),
                r.perturbed_passing.to_string(),
            ]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl C2Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_else(|| "\"none\"".into());
        let _ = writeln!(s, "[c2_certificate]");
        let _ = writeln!(s, "status = \"{}\"", self.status.name());
        match &self.status {
            CertificateStatus::Refused { t_bar } => {
                let _ = writeln!(s, "refused_at = {}", fmt_f64(*t_bar));
            }
            CertificateStatus::NotApplicable { reason } => {
                let _ = writeln!(s, "reason = {:?}", reason);
            }
            CertificateStatus::Granted => {}
        }
        let _ = writeln!(s, "x0 = {}", vec_text(&self.x0));
        let _ = writeln!(s, "xi0 = {}", vec_text(&self.xi0));
        let _ = writeln!(s, "horizon = {}", fmt_f64(self.horizon));
        for (name, t) in &self.detectors {
            let _ = writeln!(s, "conjugate_{name} = {}", opt(*t));
        }
        let _ = writeln!(s, "margin = {}", opt(self.margin));
        let _ = writeln!(s, "c0 = {}", fmt_f64(self.c0));
        let _ = writeln!(s, "semiconcavity_c = {}", fmt_f64(self.semiconcavity_c));
        let _ = writeln!(s, "riccati_lower = {}", fmt_f64(self.min_eigenvalue));
        let _ = writeln!(s, "riccati_upper = {}", fmt_f64(self.max_eigenvalue));
        let _ = writeln!(s, "max_hessian_norm = {}", fmt_f64(self.max_hessian_norm));
        let _ = writeln!(s, "tube_points = {}", self.tube_points);
        let _ = writeln!(s, "tube_skipped = {}", self.tube_skipped);
        let _ = writeln!(s, "symmetric = {}", self.symmetric);
        let _ = writeln!(s, "fd_max_error = {}", fmt_f64(self.fd_max_error));
        let _ = writeln!(s, "fd_ok = {}", self.fd_ok);
        let _ = writeln!(s, "sandwich_ok = {}", self.sandwich_ok);
        s
    }
}

/// Outcome of the full verification pipeline on a scenario.
#[derive(Debug, Clone)]
pub struct VerifyRun {
    pub scenario: String,
    pub seed: u64,
    pub h2: Option<bool>,
    pub petrov: Option<PetrovReport>,
    pub grid: Option<SweepStats>,
    pub subgradient: Option<SubgradientReport>,
    pub differentiability: Option<DifferentiabilityReport>,
    pub certificate: Option<C2Report>,
    /// Names of the failed checks, with a short reason.
    pub failures: Vec<(String, String)>,
}

impl VerifyRun {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[scenario]");
        let _ = writeln!(s, "name = {:?}", self.scenario);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "\n[hypotheses]");
        match self.h2 {
            Some(v) => {
                let _ = writeln!(s, "h2 = {v}");
            }
            None => {
                let _ = writeln!(s, "h2 = \"error\"");
            }
        }
        if let Some(p) = &self.petrov {
            let _ = writeln!(s, "petrov_min = {}", fmt_f64(p.min_value));
            let _ = writeln!(s, "petrov_argmin = {}", vec_text(&p.argmin));
            let _ = writeln!(s, "petrov_pass = {}", p.pass);
        }
        if let Some(g) = &self.grid {
            let _ = writeln!(s, "\n[grid]");
            let _ = writeln!(s, "sweeps = {}", g.sweeps);
            let _ = writeln!(s, "residual = {}", fmt_f64(g.residual));
            let _ = writeln!(s, "increases = {}", g.increases);
            let _ = writeln!(s, "finite_cells = {}", g.finite_cells);
        }
        for block in [
            self.subgradient.as_ref().map(|r| r.to_text()),
            self.differentiability.as_ref().map(|r| r.to_text()),
            self.certificate.as_ref().map(|r| r.to_text()),
        ]
        .into_iter()
        .flatten()
        {
            let _ = writeln!(s, "\n{}", block.trim_end());
        }
        let _ = writeln!(s, "\n[summary]");
        let _ = writeln!(s, "pass = {}", self.pass());
        let names: Vec<String> = self.failures.iter().map(|(k, _)| format!("{k:?}")).collect();
        let _ = writeln!(s, "failures = [{}]", names.join(", "));
        for (k, why) in &self.failures {
            let _ = writeln!(s, "# {k}: {why}");
        }
        s
    }

    /// `(file name, bytes)` of the report and the margin tables.
    pub fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut out = vec![("verify_report.toml".to_string(), self.to_text().into_bytes())];
        if let Some(r) = &self.subgradient {
            let mut b = Vec::new();
            r.write_csv(&mut b)?;
            out.push(("subgradient_margins.csv".into(), b));
        }
        if let Some(r) = &self.differentiability {
            let mut b = Vec::new();
            r.write_csv(&mut b)?;
            out.push(("differentiability_margins.csv".into(), b));
        }
        Ok(out)
    }
}

/// Hypothesis checks, grid oracle, both propagation theorems and the certificate.
pub fn verify_scenario(cfg: &ScenarioConfig) -> Result<VerifyRun> {
    verify_with_grid(cfg, None)
}

/// As [`verify_scenario`], with a previously exported grid in place of a fresh solve.
pub fn verify_with_grid(cfg: &ScenarioConfig, grid: Option<HjbGrid>) -> Result<VerifyRun> {
    let model = cfg.model()?;
    let geom = cfg.geometry()?;
    let vo = &cfg.verify;
    vo.start()?;
    let mut run = VerifyRun {
        scenario: cfg.name.clone(),
        seed: vo.seed,
        h2: None,
        petrov: None,
        grid: None,
        subgradient: None,
        differentiability: None,
        certificate: None,
        failures: Vec::new(),
    };
    let fail = |run: &mut VerifyRun, k: &str, why: String| run.failures.push((k.to_string(), why));

    let samples = geom.boundary_samples(32);
    let mut h2 = Some(true);
    for b in &samples {
        let nu = geom.distance_gradient(&b.xi);
        match model.check_h2(&b.xi, &nu, cfg.conjugate.h2_tol) {
            Ok(true) => {}
            Ok(false) => h2 = h2.map(|_| false),
            Err(_) => h2 = None,
        }
    }
    run.h2 = h2;
    if h2 != Some(true) {
        fail(&mut run, "h2", "H_pp does not have rank n-1 on the boundary".into());
    }
    match geom.petrov_check(&model, 256, geom.delta_min()) {
        Ok(p) => {
            if !p.pass {
                fail(&mut run, "petrov", format!("min H(xi, nu) = {}", fmt_f64(p.min_value)));
            }
            run.petrov = Some(p);
        }
        Err(e) => fail(&mut run, "petrov", e.to_string()),
    }

    if let Some(g) = &grid {
        if g.n() != cfg.system.n {
            return Err(Error::InvalidInput(format!("grid has dimension {}, system.n = {}", g.n(), cfg.system.n)));
        }
    }
    let solved = match grid {
        Some(g) => Ok(g),
        None => HjbGrid::solve(&model, &geom, &cfg.grid),
    };
    let grid = match solved {
        Ok(g) => {
            if g.stats.increases > 0 {
                fail(&mut run, "grid-monotone", format!("{} increasing updates", g.stats.increases));
            }
            run.grid = Some(g.stats.clone());
            g
        }
        Err(e) => {
            fail(&mut run, "grid", e.to_string());
            return Ok(run);
        }
    };
    let field = match MinTimeField::build(&model, &geom, &cfg.flow, &cfg.conjugate, cfg.field.clone()) {
        Ok(f) => f,
        Err(e) => {
            fail(&mut run, "field", e.to_string());
            return Ok(run);
        }
    };
    let oracle = Oracle::grid(&grid);
    match subgradient_propagation(&field, &oracle, vo) {
        Ok(r) => {
            if !r.pass {
                fail(&mut run, "subgradient-propagation", format!("c = {}", fmt_f64(r.c)));
            }
            run.subgradient = Some(r);
        }
        Err(e) => fail(&mut run, "subgradient-propagation", e.to_string()),
    }
    match differentiability_propagation(&field, &oracle, vo) {
        Ok(r) => {
            if !r.uniqueness {
                fail(&mut run, "gradient-uniqueness", "a perturbed candidate passes both tests".into());
            }
            if !r.pass {
                fail(&mut run, "differentiability-propagation", "a one-sided test fails".into());
            }
            run.differentiability = Some(r);
        }
        Err(e) => fail(&mut run, "differentiability-propagation", e.to_string()),
    }
    match c2_certificate(&field, &oracle, &cfg.conjugate, vo) {
        Ok(r) => {
            match &r.status {
                CertificateStatus::Granted => {
                    if !r.fd_ok {
                        fail(&mut run, "certificate-soundness", format!("fd error {}", fmt_f64(r.fd_max_error)));
                    }
                    if !r.sandwich_ok {
                        fail(&mut run, "hessian-sandwich", "Hessian eigenvalues outside the proximal bounds".into());
                    }
                }
                CertificateStatus::Refused { t_bar } => {
                    fail(&mut run, "c2-certificate", format!("conjugate time {} inside the horizon", fmt_f64(*t_bar)))
                }
                CertificateStatus::NotApplicable { reason } => fail(&mut run, "c2-certificate", reason.clone()),
            }
            run.certificate = Some(r);
        }
        Err(e) => fail(&mut run, "c2-certificate", e.to_string()),
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charflow::FlowOptions;
    use crate::field::FieldOptions;
    use crate::hamiltonian::{ConstantField, ControlAffineSystem, HamiltonianModel, VectorField};
    use crate::linalg::vector;
    use crate::oracle::FnScalar;
    use crate::target::TargetGeometry;
    use std::sync::Arc;

    fn eikonal() -> HamiltonianModel {
        let cols = (0..2).map(|i| Arc::new(ConstantField::unit(2, i)) as Arc<dyn VectorField>).collect();
        HamiltonianModel::new(ControlAffineSystem::new(Arc::new(ConstantField::zero(2)), cols, 3.0).unwrap())
    }

    fn field<'a>(m: &'a HamiltonianModel, g: &'a TargetGeometry) -> MinTimeField<'a> {
        MinTimeField::build(
            m,
            g,
            &FlowOptions::default(),
            &ConjugateOptions::default(),
            FieldOptions { samples: 96, ..FieldOptions::default() },
        )
        .unwrap()
    }

    #[test]
    fn disk_propagation_on_exact_samples() {
        let m = eikonal();
        let g = TargetGeometry::disk([0.0, 0.0], 1.0).unwrap();
        let f = field(&m, &g);
        let exact = FnScalar::new(2, |x: &Vector| (x.norm() - 1.0).max(0.0));
        let oracle = Oracle::exact(&exact);
        let opts = VerifyOptions { x0: Some(vec![2.5, 0.0]), t_end: Some(1.4), c: Some(1.0), ..VerifyOptions::default() };
        let sub = subgradient_propagation(&f, &oracle, &opts).unwrap();
        assert!(sub.pass, "{}", sub.to_text());
        assert_eq!(sub.samples.len(), 10);
        assert!(sub.samples.iter().all(|s| s.perturbed_passing == 0));
        let last = &sub.samples[9].point;
        assert!((last.x[0] - 1.1).abs() < 1e-6 && (last.p[0] - 1.0).abs() < 1e-6);
        let diff = differentiability_propagation(&f, &oracle, &opts).unwrap();
        assert!(diff.pass, "{}", diff.to_text());
        assert!((diff.petrov_value - 1.0).abs() < 1e-9);
        let c2 = c2_certificate(&f, &oracle, &ConjugateOptions::default(), &opts).unwrap();
        assert_eq!(c2.status, CertificateStatus::Granted, "{}", c2.to_text());
        assert!(c2.max_hessian_norm <= 1.0 + 1e-6);
        assert!(c2.fd_ok && c2.symmetric && c2.sandwich_ok, "{}", c2.to_text());
    }

    #[test]
    fn annulus_certificates() {
        let m = eikonal();
        let g = TargetGeometry::annulus([0.0, 0.0], 1.0, 2.0).unwrap();
        let f = field(&m, &g);
        let exact = FnScalar::new(2, |x: &Vector| {
            let r = x.norm();
            if r < 1.0 { 1.0 - r } else if r > 2.0 { r - 2.0 } else { 0.0 }
        });
        let oracle = Oracle::exact(&exact);
        let conj = ConjugateOptions::default();
        let opts = VerifyOptions { x0: Some(vec![0.05, 0.0]), ..VerifyOptions::default() };
        let c2 = c2_certificate(&f, &oracle, &conj, &opts).unwrap();
        assert_eq!(c2.status, CertificateStatus::Granted, "{}", c2.to_text());
        assert!((c2.margin.unwrap() - 0.05).abs() < 1e-3);
        let forced = VerifyOptions { horizon_override: Some(1.0), ..opts.clone() };
        let c2 = c2_certificate(&f, &oracle, &conj, &forced).unwrap();
        assert!(matches!(c2.status, CertificateStatus::Refused { t_bar } if (t_bar - 1.0).abs() < 1e-3));
        let focus = VerifyOptions { x0: Some(vec![0.0, 0.0]), ..VerifyOptions::default() };
        let c2 = c2_certificate(&f, &oracle, &conj, &focus).unwrap();
        assert!(matches!(c2.status, CertificateStatus::NotApplicable { .. }), "{}", c2.to_text());
    }

    #[test]
    fn perturbed_candidate_count() {
        let c = perturbed_candidates(&vector(&[1.0, 0.0]), 0.2);
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|q| ((q - vector(&[1.0, 0.0])).norm() - 0.2).abs() < 1e-12));
    }

    #[test]
    fn options_validation() {
        assert!(VerifyOptions { samples: 1, ..VerifyOptions::default() }.validate().is_err());
        assert!(VerifyOptions { radius: 0.0, ..VerifyOptions::default() }.validate().is_err());
        assert!(VerifyOptions::default().start().is_err());
    }
}
