//! Backward Hamiltonian characteristics with their variational, partial
//! variational and Riccati companions, integrated by fixed-step RK4.

use std::io::Write;

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hamiltonian::{Derivatives, HamiltonianModel};
use crate::linalg::{op_norm, sym_norm, Matrix, Vector};
use crate::target::{BoundarySample, TargetGeometry};

/// Which blocks are carried along a characteristic. Each level contains the previous ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    /// `Y`, `P`.
    Flow,
    /// Adds `Yjt`, `Pjt`.
    Variational,
    /// Adds the `n-1` chart columns `Yj`, `Pj` as a separate system.
    Partial,
    /// Adds `R`.
    Riccati,
}

/// Offsets of each block in the flat state vector. Matrices are column-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub level: Level,
}

impl Layout {
    pub fn new(n: usize, level: Level) -> Self {
        Self { n, level }
    }
    fn sq(&self) -> usize {
        self.n * self.n
    }
    fn rect(&self) -> usize {
        self.n * (self.n - 1)
    }
    pub fn y(&self) -> std::ops::Range<usize> {
        0..self.n
    }
    pub fn p(&self) -> std::ops::Range<usize> {
        self.n..2 * self.n
    }
    pub fn yjt(&self) -> std::ops::Range<usize> {
        let a = 2 * self.n;
        a..a + self.sq()
    }
    pub fn pjt(&self) -> std::ops::Range<usize> {
        let a = 2 * self.n + self.sq();
        a..a + self.sq()
    }
    pub fn yj(&self) -> std::ops::Range<usize> {
        let a = 2 * self.n + 2 * self.sq();
        a..a + self.rect()
    }
    pub fn pj(&self) -> std::ops::Range<usize> {
        let a = 2 * self.n + 2 * self.sq() + self.rect();
        a..a + self.rect()
    }
    pub fn r(&self) -> std::ops::Range<usize> {
        let a = 2 * self.n + 2 * self.sq() + 2 * self.rect();
        a..a + self.sq()
    }
    pub fn len(&self) -> usize {
        match self.level {
            Level::Flow => 2 * self.n,
            Level::Variational => 2 * self.n + 2 * self.sq(),
            Level::Partial => 2 * self.n + 2 * self.sq() + 2 * self.rect(),
            Level::Riccati => 2 * self.n + 3 * self.sq() + 2 * self.rect(),
        }
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    fn has(&self, level: Level) -> bool {
        self.level >= level
    }
    fn vector(&self, z: &[f64], r: std::ops::Range<usize>) -> Vector {
        Vector::from_column_slice(&z[r])
    }
    fn matrix(&self, z: &[f64], r: std::ops::Range<usize>, cols: usize) -> Matrix {
        Matrix::from_column_slice(self.n, cols, &z[r])
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FlowOptions {
    pub step: f64,
    pub t_max: f64,
    pub blowup_threshold: f64,
    /// Bound on `step * |H_pp| |R|` that triggers Riccati substeps.
    pub riccati_kappa: f64,
    pub conservation_tol: f64,
    /// Multiplies the terminal costate; 1 gives `H = 1` along characteristics.
    pub costate_scale: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            t_max: 2.0,
            blowup_threshold: 1e6,
            riccati_kappa: 0.05,
            conservation_tol: 1e-6,
            costate_scale: 1.0,
        }
    }
}

impl FlowOptions {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("flow.{name} must be positive and finite, got {v}")))
            }
        };
        pos("step", self.step)?;
        pos("t_max", self.t_max)?;
        pos("blowup_threshold", self.blowup_threshold)?;
        pos("riccati_kappa", self.riccati_kappa)?;
        pos("conservation_tol", self.conservation_tol)?;
        pos("costate_scale", self.costate_scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truncation {
    pub node: usize,
    pub t: f64,
    pub reason: String,
}

/// Threshold crossing of `|R|`, bracketed as `t_lo < t_cross <= t_hi` with `t_hi` the
/// first time found above the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlowUp {
    pub t_lo: f64,
    pub t_hi: f64,
    /// Last node before the crossing.
    pub node: usize,
}

/// Time-sampled solution along one characteristic.
#[derive(Debug, Clone)]
pub struct CharacteristicRecord {
    pub chart: usize,
    pub component: usize,
    pub eta: Vec<f64>,
    pub layout: Layout,
    pub step: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// `det Yjt` times the sign of its value at `t = 0`, so it starts positive.
    pub det: Vec<f64>,
    /// `|H(Y, P) - H(Y(0), P(0))|`.
    pub h_drift: Vec<f64>,
    pub norm_r: Vec<f64>,
    pub orientation: f64,
    pub h0: f64,
    pub truncation: Option<Truncation>,
    pub blowup: Option<BlowUp>,
}

impl CharacteristicRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn n(&self) -> usize {
        self.layout.n
    }
    pub fn level(&self) -> Level {
        self.layout.level
    }
    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("records have at least one node")
    }
    pub fn y(&self, k: usize) -> Vector {
        self.layout.vector(&self.states[k], self.layout.y())
    }
    pub fn p(&self, k: usize) -> Vector {
        self.layout.vector(&self.states[k], self.layout.p())
    }
    pub fn yjt(&self, k: usize) -> Option<Matrix> {
        self.layout.has(Level::Variational).then(|| self.layout.matrix(&self.states[k], self.layout.yjt(), self.n()))
    }
    pub fn pjt(&self, k: usize) -> Option<Matrix> {
        self.layout.has(Level::Variational).then(|| self.layout.matrix(&self.states[k], self.layout.pjt(), self.n()))
    }
    pub fn yj(&self, k: usize) -> Option<Matrix> {
        self.layout.has(Level::Partial).then(|| self.layout.matrix(&self.states[k], self.layout.yj(), self.n() - 1))
    }
    pub fn pj(&self, k: usize) -> Option<Matrix> {
        self.layout.has(Level::Partial).then(|| self.layout.matrix(&self.states[k], self.layout.pj(), self.n() - 1))
    }
    pub fn r(&self, k: usize) -> Option<Matrix> {
        self.layout.has(Level::Riccati).then(|| self.layout.matrix(&self.states[k], self.layout.r(), self.n()))
    }
    pub fn max_h_drift(&self) -> f64 {
        self.h_drift.iter().fold(0.0, |a, b| a.max(*b))
    }

    /// `|R - Pjt Yjt^{-1}|` at node `k`, when both are available and `Yjt` is invertible.
    pub fn riccati_consistency(&self, k: usize) -> Option<f64> {
        let r = self.r(k)?;
        let y = self.yjt(k)?;
        let p = self.pjt(k)?;
        let inv = y.try_inverse()?;
        Some(op_norm(&(r - p * inv)))
    }

    /// Nearest node index to time `t`.
    pub fn node_at(&self, t: f64) -> usize {
        match self.times.binary_search_by(|s| s.total_cmp(&t)) {
            Ok(k) => k,
            Err(0) => 0,
            Err(k) if k >= self.times.len() => self.times.len() - 1,
            Err(k) => {
                if (t - self.times[k - 1]) <= (self.times[k] - t) {
                    k - 1
                } else {
                    k
                }
            }
        }
    }

    /// One row per node: `t, y.., p.., detYjt, normR, Hdrift`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.n();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("y{i}")));
        header.extend((0..n).map(|i| format!("p{i}")));
        header.extend(["detYjt", "normR", "Hdrift"].map(String::from));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![fmt_f64(self.times[k])];
            row.extend(self.states[k][..2 * n].iter().map(|v| fmt_f64(*v)));
            row.push(self.level_value(Level::Variational, self.det[k]));
            row.push(self.level_value(Level::Riccati, self.norm_r[k]));
            row.push(fmt_f64(self.h_drift[k]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    fn level_value(&self, needed: Level, v: f64) -> String {
        if self.layout.has(needed) {
            fmt_f64(v)
        } else {
            String::new()
        }
    }
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Integrator bound to a model, a target and options.
#[derive(Debug, Clone)]
pub struct Characteristics<'a> {
    pub model: &'a HamiltonianModel,
    pub geom: &'a TargetGeometry,
    pub opts: FlowOptions,
}

impl<'a> Characteristics<'a> {
    pub fn new(model: &'a HamiltonianModel, geom: &'a TargetGeometry, opts: FlowOptions) -> Result<Self> {
        opts.validate()?;
        if model.n() != geom.n() {
            return Err(Error::InvalidInput(format!(
                "system dimension {} does not match target dimension {}",
                model.n(),
                geom.n()
            )));
        }
        if model.n() < 2 {
            return Err(Error::InvalidInput("characteristics need n >= 2".into()));
        }
        Ok(Self { model, geom, opts })
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn layout(&self, level: Level) -> Layout {
        Layout::new(self.n(), level)
    }

    /// Initial data at `xi = phi(eta)`.
    pub fn initial_state(&self, chart: usize, eta: &[f64], level: Level) -> Result<Vec<f64>> {
        let ch = self.geom.chart(chart)?;
        let lay = self.layout(level);
        let n = self.n();
        let xi = ch.point(eta);
        let lambda = self.opts.costate_scale;
        let g = self.geom.terminal_costate(self.model, &xi)? * lambda;
        let mut z = vec![0.0; lay.len()];
        z[lay.y()].copy_from_slice(xi.as_slice());
        z[lay.p()].copy_from_slice(g.as_slice());
        if level == Level::Flow {
            return Ok(z);
        }
        let d = self.model.derivatives(&xi, &g, false)?;
        let dphi = ch.jacobian(eta);
        let dg = self.geom.terminal_costate_jacobian(self.model, chart, eta)? * lambda;
        let mut yjt = Matrix::zeros(n, n);
        let mut pjt = Matrix::zeros(n, n);
        yjt.view_mut((0, 0), (n, n - 1)).copy_from(&dphi);
        pjt.view_mut((0, 0), (n, n - 1)).copy_from(&dg);
        yjt.set_column(n - 1, &d.grad_p);
        pjt.set_column(n - 1, &(-&d.grad_x));
        z[lay.yjt()].copy_from_slice(yjt.as_slice());
        z[lay.pjt()].copy_from_slice(pjt.as_slice());
        if level >= Level::Partial {
            z[lay.yj()].copy_from_slice(dphi.as_slice());
            z[lay.pj()].copy_from_slice(dg.as_slice());
        }
        if level == Level::Riccati {
            let inv = yjt.clone().try_inverse().ok_or_else(|| Error::IntegrationFailure {
                node: 0,
                t: 0.0,
                reason: "Yjt(0) is singular".into(),
            })?;
            let r = &pjt * inv;
            let r = (&r + r.transpose()) * 0.5;
            z[lay.r()].copy_from_slice(r.as_slice());
        }
        Ok(z)
    }

    fn derivatives(&self, lay: &Layout, z: &[f64]) -> Result<Derivatives> {
        let y = lay.vector(z, lay.y());
        let p = lay.vector(z, lay.p());
        self.model.derivatives(&y, &p, lay.has(Level::Variational))
    }

    /// Right-hand side of the full system at state `z`.
    pub fn rhs(&self, lay: &Layout, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.derivatives(lay, z)?;
        Ok(self.rhs_with(lay, z, &d))
    }

    fn rhs_with(&self, lay: &Layout, z: &[f64], d: &Derivatives) -> Vec<f64> {
        let n = lay.n;
        let mut out = vec![0.0; lay.len()];
        out[lay.y()].copy_from_slice(d.grad_p.as_slice());
        for (o, g) in out[lay.p()].iter_mut().zip(d.grad_x.iter()) {
            *o = -g;
        }
        let Some(hess) = &d.hess else {
            return out;
        };
        let flat = self.model.system().is_state_independent();
        let pair = |yr: std::ops::Range<usize>, pr: std::ops::Range<usize>, cols: usize, out: &mut [f64]| {
            let p = lay.matrix(z, pr.clone(), cols);
            if flat {
                // H_xx, H_xp and H_px vanish.
                out[yr].copy_from_slice((&hess.pp * &p).as_slice());
                return;
            }
            let y = lay.matrix(z, yr.clone(), cols);
            let dy = &hess.xp * &y + &hess.pp * &p;
            let dp = -(&hess.xx * &y + &hess.px * &p);
            out[yr].copy_from_slice(dy.as_slice());
            out[pr].copy_from_slice(dp.as_slice());
        };
        pair(lay.yjt(), lay.pjt(), n, &mut out);
        if lay.has(Level::Partial) {
            pair(lay.yj(), lay.pj(), n - 1, &mut out);
        }
        if lay.has(Level::Riccati) {
            let r = lay.matrix(z, lay.r(), n);
            let dr = if flat {
                -(&r * &hess.pp * &r)
            } else {
                -(&hess.px * &r + &r * &hess.xp + &r * &hess.pp * &r + &hess.xx)
            };
            out[lay.r()].copy_from_slice(dr.as_slice());
        }
        out
    }

    fn rk4(&self, lay: &Layout, z: &[f64], dt: f64, k1: Option<Vec<f64>>) -> Result<Vec<f64>> {
        let axpy = |a: &[f64], s: f64, b: &[f64]| a.iter().zip(b).map(|(x, y)| x + s * y).collect::<Vec<_>>();
        let k1 = match k1 {
            Some(k) => k,
            None => self.rhs(lay, z)?,
        };
        let k2 = self.rhs(lay, &axpy(z, 0.5 * dt, &k1))?;
        let k3 = self.rhs(lay, &axpy(z, 0.5 * dt, &k2))?;
        let k4 = self.rhs(lay, &axpy(z, dt, &k3))?;
        Ok((0..z.len()).map(|i| z[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect())
    }

    /// Largest substep allowed by the Riccati rate bound.
    fn riccati_substep(&self, lay: &Layout, z: &[f64], d: &Derivatives) -> f64 {
        let hess = d.hess.as_ref().expect("riccati level carries hessians");
        let r = lay.matrix(z, lay.r(), lay.n);
        let rate = 2.0 * hess.pp.norm() * r.norm() + 2.0 * hess.xp.norm() + hess.xx.norm().sqrt() + 1e-300;
        self.opts.riccati_kappa / rate
    }

    fn r_norm(&self, lay: &Layout, z: &[f64]) -> f64 {
        sym_norm(&lay.matrix(z, lay.r(), lay.n))
    }

    /// Advance by `dt` in one RK4 step, or several rate-limited substeps when `R` is carried.
    /// Returns the new state, or the blow-up bracket (relative to the start) if `|R|`
    /// crosses the threshold.
    fn advance_once(&self, lay: &Layout, z: &[f64], dt: f64) -> Result<std::result::Result<Vec<f64>, (f64, f64)>> {
        if !lay.has(Level::Riccati) {
            return Ok(Ok(self.rk4(lay, z, dt, None)?));
        }
        let thr = self.opts.blowup_threshold;
        let mut done = 0.0;
        let mut cur = z.to_vec();
        while done < dt {
            let d = self.derivatives(lay, &cur)?;
            let sigma = self.riccati_substep(lay, &cur, &d).min(dt - done);
            let k1 = self.rhs_with(lay, &cur, &d);
            let next = self.rk4(lay, &cur, sigma, Some(k1.clone()))?;
            let nr = self.r_norm(lay, &next);
            if !(nr < thr) {
                // Locate the crossing inside this substep.
                let (mut lo, mut hi) = (0.0, sigma);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    let trial = self.rk4(lay, &cur, mid, Some(k1.clone()))?;
                    if self.r_norm(lay, &trial) < thr {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-14 * (1.0 + done) {
                        break;
                    }
                }
                return Ok(Err((done + lo, done + hi)));
            }
            cur = next;
            done += sigma;
        }
        Ok(Ok(cur))
    }

    /// Integrate from `z` over `dt` with uniform steps no longer than `opts.step`.
    /// Blow-up of `R` is reported as an integration failure.
    pub fn advance(&self, level: Level, z: &[f64], dt: f64) -> Result<Vec<f64>> {
        let lay = self.layout(level);
        if dt <= 0.0 {
            return Ok(z.to_vec());
        }
        let steps = (dt / self.opts.step - 1e-9).ceil().max(1.0) as usize;
        let h = dt / steps as f64;
        let mut cur = z.to_vec();
        for _ in 0..steps {
            cur = match self.advance_once(&lay, &cur, h)? {
                Ok(next) => next,
                Err((lo, _)) => {
                    return Err(Error::IntegrationFailure {
                        node: 0,
                        t: lo,
                        reason: "Riccati blow-up during advance".into(),
                    })
                }
            };
        }
        check_finite(&cur, 0, dt)?;
        Ok(cur)
    }

    /// State at time `s` on the characteristic through `phi(eta)`.
    pub fn state_at(&self, chart: usize, eta: &[f64], s: f64, level: Level) -> Result<Vec<f64>> {
        let z0 = self.initial_state(chart, eta, level)?;
        self.advance(level, &z0, s)
    }

    /// Re-integrate from node `k` of a record over `dt`.
    pub fn resume(&self, record: &CharacteristicRecord, k: usize, dt: f64) -> Result<Vec<f64>> {
        self.advance(record.level(), &record.states[k], dt)
    }

    /// Oriented determinant of the `Yjt` block of a state.
    pub fn oriented_det(&self, record: &CharacteristicRecord, z: &[f64]) -> f64 {
        record.layout.matrix(z, record.layout.yjt(), record.n()).determinant() * record.orientation
    }

    pub fn integrate(&self, chart: usize, eta: &[f64], level: Level) -> Result<CharacteristicRecord> {
        let lay = self.layout(level);
        let n = self.n();
        let z0 = self.initial_state(chart, eta, level)?;
        let y0 = lay.vector(&z0, lay.y());
        let p0 = lay.vector(&z0, lay.p());
        let h0 = self.model.eval(&y0, &p0)?;
        let orientation = if lay.has(Level::Variational) {
            let d = lay.matrix(&z0, lay.yjt(), n).determinant();
            if d == 0.0 {
                return Err(Error::IntegrationFailure { node: 0, t: 0.0, reason: "Yjt(0) is singular".into() });
            }
            d.signum()
        } else {
            1.0
        };

        let mut rec = CharacteristicRecord {
            chart,
            component: self.geom.chart(chart)?.component(),
            eta: eta.to_vec(),
            layout: lay,
            step: self.opts.step,
            times: Vec::new(),
            states: Vec::new(),
            det: Vec::new(),
            h_drift: Vec::new(),
            norm_r: Vec::new(),
            orientation,
            h0,
            truncation: None,
            blowup: None,
        };
        self.push_node(&mut rec, 0.0, z0)?;

        let steps = (self.opts.t_max / self.opts.step - 1e-9).ceil() as usize;
        for k in 1..=steps {
            let t_prev = rec.t_end();
            let t = (k as f64 * self.opts.step).min(self.opts.t_max);
            let z = rec.states.last().expect("nonempty");
            match self.advance_once(&lay, z, t - t_prev) {
                Ok(Ok(next)) => {
                    check_finite(&next, k, t)?;
                    if let Err(e) = self.push_node(&mut rec, t, next) {
                        match e {
                            Error::SingularCostate { .. } | Error::KernelCostate { .. } => {
                                rec.truncation = Some(Truncation { node: k - 1, t: t_prev, reason: e.to_string() });
                                break;
                            }
                            other => return Err(other),
                        }
                    }
                }
                Ok(Err((lo, hi))) => {
                    rec.blowup = Some(BlowUp { t_lo: t_prev + lo, t_hi: t_prev + hi, node: k - 1 });
                    break;
                }
                Err(e @ (Error::SingularCostate { .. } | Error::KernelCostate { .. })) => {
                    rec.truncation = Some(Truncation { node: k - 1, t: t_prev, reason: e.to_string() });
                    break;
                }
                Err(Error::InvalidInput(reason)) => {
                    return Err(Error::IntegrationFailure { node: k, t, reason });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(rec)
    }

    fn push_node(&self, rec: &mut CharacteristicRecord, t: f64, z: Vec<f64>) -> Result<()> {
        let lay = rec.layout;
        let y = lay.vector(&z, lay.y());
        let p = lay.vector(&z, lay.p());
        let pn = p.norm();
        if pn < self.model.zero_p_guard() {
            return Err(Error::SingularCostate { norm: pn, guard: self.model.zero_p_guard() });
        }
        self.model.system().check_growth(&y)?;
        let h = self.model.eval(&y, &p)?;
        let det = if lay.has(Level::Variational) { self.oriented_det(rec, &z) } else { f64::NAN };
        let nr = if lay.has(Level::Riccati) { self.r_norm(&lay, &z) } else { f64::NAN };
        rec.times.push(t);
        rec.det.push(det);
        rec.h_drift.push((h - rec.h0).abs());
        rec.norm_r.push(nr);
        rec.states.push(z);
        Ok(())
    }

    pub fn flow(&self, chart: usize, eta: &[f64]) -> Result<CharacteristicRecord> {
        self.integrate(chart, eta, Level::Flow)
    }

    pub fn variational_flow(&self, chart: usize, eta: &[f64]) -> Result<CharacteristicRecord> {
        self.integrate(chart, eta, Level::Variational)
    }

    pub fn partial_variational_flow(&self, chart: usize, eta: &[f64]) -> Result<CharacteristicRecord> {
        self.integrate(chart, eta, Level::Partial)
    }

    pub fn riccati_flow(&self, chart: usize, eta: &[f64]) -> Result<CharacteristicRecord> {
        self.integrate(chart, eta, Level::Riccati)
    }

    /// Integrate every sample independently; output order follows the input.
    pub fn sweep(&self, samples: &[BoundarySample], level: Level) -> Vec<Result<CharacteristicRecord>> {
        samples.par_iter().map(|s| self.integrate(s.chart, &s.eta, level)).collect()
    }
}

fn check_finite(z: &[f64], node: usize, t: f64) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationFailure { node, t, reason: "non-finite state".into() })
    }
}
