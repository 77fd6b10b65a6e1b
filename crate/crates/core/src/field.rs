//! Minimum time function on the pre-conjugate tube, reconstructed from
//! characteristics.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Deserialize;

use crate::charflow::{fmt_f64, CharacteristicRecord, Characteristics, FlowOptions, Level};
use crate::conjugate::{last_node_before, ConjugateDetector, ConjugateOptions};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FieldOptions {
    /// Boundary samples per chart.
    pub samples: usize,
    pub t_max: f64,
    pub margin: f64,
    /// Integration step for the stored records.
    pub step: f64,
    /// Step for re-integration inside `eval`, trajectories and level sets.
    pub eval_step: f64,
    /// Keep every `stride`-th node in the seed index.
    pub stride: usize,
    pub capture_factor: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for FieldOptions {
    fn default() -> Self {
        Self {
            samples: 256,
            t_max: 2.0,
            margin: 0.05,
            step: 1e-3,
            eval_step: 1e-2,
            stride: 10,
            capture_factor: 3.0,
            newton_tol: 1e-10,
            newton_max_iter: 50,
        }
    }
}

/// One characteristic of the field with its valid horizon.
#[derive(Debug, Clone)]
pub struct FieldRecord {
    pub chart: usize,
    pub component: usize,
    pub eta: Vec<f64>,
    pub horizon: f64,
    pub conjugate_time: Option<f64>,
    pub max_h_drift: f64,
    /// Stored nodes: `(t, state)` at Riccati level.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub det: Vec<f64>,
}

/// Result of evaluating the field at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldValue {
    pub t: f64,
    pub grad: Vector,
    pub hess: Matrix,
    pub chart: usize,
    pub eta: Vec<f64>,
    pub inside_target: bool,
    /// Characteristics from more than one boundary component reach the point within their horizons.
    pub overlap: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Forward time from the start point, `0..=duration`.
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub dual: Vec<Vector>,
    pub duration: f64,
    pub chart: usize,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LevelSet {
    pub t: f64,
    pub points: Vec<(usize, Vec<f64>, Vector)>,
    /// Samples whose horizon ends before `t`.
    pub skipped: Vec<(usize, Vec<f64>)>,
}

impl LevelSet {
    /// Columns `chart, eta.., y..`.
    pub fn write_csv<W: Write>(&self, n: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["chart".to_string()];
        header.extend((0..n - 1).map(|i| format!("eta{i}")));
        header.extend((0..n).map(|i| format!("y{i}")));
        w.write_record(&header)?;
        for (chart, eta, y) in &self.points {
            let mut row = vec![chart.to_string()];
            row.extend(eta.iter().map(|v| fmt_f64(*v)));
            row.extend(y.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct MinTimeField<'a> {
    flow: Characteristics<'a>,
    eval_flow: Characteristics<'a>,
    opts: FieldOptions,
    conj: ConjugateOptions,
    records: Vec<FieldRecord>,
    cell: f64,
    index: HashMap<Vec<i64>, Vec<(u32, u32)>>,
    capture_radius: f64,
    max_spacing: f64,
}

impl<'a> MinTimeField<'a> {
    /// Integrate from every Petrov-admissible boundary sample and index the nodes.
    pub fn build(
        model: &'a crate::hamiltonian::HamiltonianModel,
        geom: &'a crate::target::TargetGeometry,
        flow_opts: &FlowOptions,
        conj: &ConjugateOptions,
        opts: FieldOptions,
    ) -> Result<Self> {
        if opts.samples == 0 || opts.stride == 0 || !(opts.margin >= 0.0) {
            return Err(Error::InvalidInput("field needs samples > 0, stride > 0 and margin >= 0".into()));
        }
        let fo = FlowOptions { step: opts.step, t_max: opts.t_max, ..flow_opts.clone() };
        let flow = Characteristics::new(model, geom, fo.clone())?;
        let eval_flow = Characteristics::new(model, geom, FlowOptions { step: opts.eval_step, ..fo })?;
        let samples = geom.boundary_samples(opts.samples);
        let built: Vec<Result<Option<FieldRecord>>> = samples
            .par_iter()
            .map(|s| match flow.riccati_flow(s.chart, &s.eta) {
                Ok(rec) => Self::field_record(&flow, conj, &opts, &rec).map(Some),
                Err(Error::PetrovFailure { .. } | Error::KernelCostate { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect();
        let mut records = Vec::new();
        for r in built {
            if let Some(r) = r? {
                records.push(r);
            }
        }
        if records.is_empty() {
            return Err(Error::EmptyField);
        }
        let max_spacing = Self::max_spacing(&flow, &records);
        let capture_radius = opts.capture_factor * max_spacing;
        let mut field = Self {
            flow,
            eval_flow,
            opts,
            conj: conj.clone(),
            records,
            cell: capture_radius,
            index: HashMap::new(),
            capture_radius,
            max_spacing,
        };
        field.build_index();
        Ok(field)
    }

    fn field_record(
        flow: &Characteristics<'_>,
        conj: &ConjugateOptions,
        opts: &FieldOptions,
        rec: &CharacteristicRecord,
    ) -> Result<FieldRecord> {
        let det = ConjugateDetector::new(flow, conj.clone()).detect_by_det(rec)?;
        let conj_time = match (det.conjugate_time, rec.blowup) {
            (Some(t), Some(b)) => Some(t.min(b.t_hi)),
            (Some(t), None) => Some(t),
            (None, Some(b)) => Some(b.t_hi),
            (None, None) => None,
        };
        let mut horizon = rec.t_end().min(opts.t_max);
        if let Some(t) = conj_time {
            horizon = horizon.min(t - opts.margin);
        }
        let horizon = horizon.max(0.0);
        let det_thr = conj.det_tol * rec.det[0].abs();
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut dets = Vec::new();
        let last = last_node_before(rec, horizon);
        for k in 0..=last {
            if k % opts.stride != 0 && k != last {
                continue;
            }
            if rec.h_drift[k] > flow.opts.conservation_tol || rec.det[k] <= det_thr {
                continue;
            }
            times.push(rec.times[k]);
            states.push(rec.states[k].clone());
            dets.push(rec.det[k]);
        }
        Ok(FieldRecord {
            chart: rec.chart,
            component: rec.component,
            eta: rec.eta.clone(),
            horizon,
            conjugate_time: conj_time,
            max_h_drift: rec.max_h_drift(),
            times,
            states,
            det: dets,
        })
    }

    /// Largest gap along a ray or between a ray and its nearest neighbours in parameter space.
    fn max_spacing(flow: &Characteristics<'_>, records: &[FieldRecord]) -> f64 {
        let lay = flow.layout(Level::Riccati);
        let y = |r: &FieldRecord, k: usize| Vector::from_column_slice(&r.states[k][lay.y()]);
        let geom = flow.geom;
        let eta_dist = |a: &FieldRecord, b: &FieldRecord| -> f64 {
            let Ok(ch) = geom.chart(a.chart) else {
                return f64::INFINITY;
            };
            let (dom, per) = (ch.domain(), ch.periodic());
            a.eta
                .iter()
                .zip(&b.eta)
                .enumerate()
                .map(|(i, (u, v))| {
                    let mut d = (u - v).abs();
                    if per[i] {
                        d = d.min(dom[i].1 - dom[i].0 - d);
                    }
                    d * d
                })
                .sum()
        };
        let neighbours = 2 * (flow.n() - 1);
        let mut spacing = 0.0_f64;
        for (i, r) in records.iter().enumerate() {
            for k in 1..r.states.len() {
                spacing = spacing.max((y(r, k) - y(r, k - 1)).norm());
            }
            let mut near: Vec<(f64, usize)> = records
                .iter()
                .enumerate()
                .filter(|(j, o)| *j != i && o.chart == r.chart)
                .map(|(j, o)| (eta_dist(r, o), j))
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(neighbours);
            for k in 0..r.states.len() {
                let here = y(r, k);
                let mut nearest = f64::INFINITY;
                for &(_, j) in &near {
                    let o = &records[j];
                    let kk = o.times.partition_point(|t| *t < r.times[k]);
                    if kk < o.states.len() {
                        nearest = nearest.min((y(o, kk) - &here).norm());
                    }
                }
                if nearest.is_finite() {
                    spacing = spacing.max(nearest);
                }
            }
        }
        spacing.max(flow.opts.step)
    }

    fn key(&self, x: &[f64]) -> Vec<i64> {
        x.iter().map(|v| (v / self.cell).floor() as i64).collect()
    }

    fn build_index(&mut self) {
        let lay = self.flow.layout(Level::Riccati);
        let mut index: HashMap<Vec<i64>, Vec<(u32, u32)>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            for (k, z) in r.states.iter().enumerate() {
                index.entry(self.key(&z[lay.y()])).or_default().push((i as u32, k as u32));
            }
        }
        self.index = index;
    }

    pub fn records(&self) -> &[FieldRecord] {
        &self.records
    }

    pub fn options(&self) -> &FieldOptions {
        &self.opts
    }

    pub fn characteristics(&self) -> &Characteristics<'a> {
        &self.flow
    }

    pub fn capture_radius(&self) -> f64 {
        self.capture_radius
    }

    pub fn max_node_spacing(&self) -> f64 {
        self.max_spacing
    }

    pub fn n(&self) -> usize {
        self.flow.n()
    }

    /// Nearest index node per chart within the capture radius.
    fn seeds(&self, x: &Vector) -> Vec<(usize, usize, f64)> {
        let lay = self.flow.layout(Level::Riccati);
        let base = self.key(x.as_slice());
        let n = base.len();
        let mut best: HashMap<usize, (usize, usize, f64)> = HashMap::new();
        let offsets = 3usize.pow(n as u32);
        for o in 0..offsets {
            let mut rem = o;
            let mut key = base.clone();
            for kv in key.iter_mut() {
                *kv += (rem % 3) as i64 - 1;
                rem /= 3;
            }
            let Some(bucket) = self.index.get(&key) else {
                continue;
            };
            for &(i, k) in bucket {
                let r = &self.records[i as usize];
                let y = &r.states[k as usize][lay.y()];
                let d = y.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if d > self.capture_radius {
                    continue;
                }
                let cand = (i as usize, k as usize, d);
                best.entry(r.chart)
                    .and_modify(|c| {
                        if (d, cand.0, cand.1) < (c.2, c.0, c.1) {
                            *c = cand;
                        }
                    })
                    .or_insert(cand);
            }
        }
        let mut out: Vec<_> = best.into_values().collect();
        out.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
        out
    }

    fn wrap_eta(&self, chart: usize, eta: &mut [f64]) -> Result<()> {
        let ch = self.flow.geom.chart(chart)?;
        for ((v, (lo, hi)), per) in eta.iter_mut().zip(ch.domain()).zip(ch.periodic()) {
            if per {
                *v = lo + (*v - lo).rem_euclid(hi - lo);
            } else {
                *v = v.clamp(lo, hi);
            }
        }
        Ok(())
    }

    /// Newton on `Y(eta, s) = x` from a seed; returns `(eta, s, iterations)`.
    fn newton(&self, chart: usize, eta0: &[f64], s0: f64, x: &Vector, horizon: f64) -> Result<(Vec<f64>, f64, usize)> {
        let n = self.n();
        let lay = self.flow.layout(Level::Variational);
        let s_cap = horizon + self.capture_radius;
        let eval = |eta: &[f64], s: f64| -> Result<(Vector, Matrix)> {
            let z = self.eval_flow.state_at(chart, eta, s, Level::Variational)?;
            let y = Vector::from_column_slice(&z[lay.y()]);
            let j = Matrix::from_column_slice(n, n, &z[lay.yjt()]);
            Ok((y - x, j))
        };
        let mut eta = eta0.to_vec();
        let mut s = s0;
        let (mut res, mut jac) = eval(&eta, s)?;
        let mut rn = res.norm();
        for it in 0..self.opts.newton_max_iter {
            if rn <= self.opts.newton_tol {
                return Ok((eta, s, it));
            }
            let Some(delta) = jac.clone().lu().solve(&res) else {
                return Err(Error::NoConvergence { iterations: it, residual: rn });
            };
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..20 {
                let mut e2: Vec<f64> = eta.iter().zip(delta.iter()).map(|(e, d)| e - lambda * d).collect();
                self.wrap_eta(chart, &mut e2)?;
                let s2 = (s - lambda * delta[n - 1]).clamp(0.0, s_cap);
                let (r2, j2) = eval(&e2, s2)?;
                let n2 = r2.norm();
                if n2 < rn || n2 <= self.opts.newton_tol {
                    eta = e2;
                    s = s2;
                    res = r2;
                    jac = j2;
                    rn = n2;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                return Err(Error::NoConvergence { iterations: it, residual: rn });
            }
        }
        if rn <= self.opts.newton_tol {
            Ok((eta, s, self.opts.newton_max_iter))
        } else {
            Err(Error::NoConvergence { iterations: self.opts.newton_max_iter, residual: rn })
        }
    }

    pub fn eval(&self, x: &Vector) -> Result<FieldValue> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::InvalidInput(format!("expected a point in R^{n}")));
        }
        crate::error::ensure_finite("query point", x.as_slice())?;
        if self.flow.geom.contains(x) {
            return Ok(FieldValue {
                t: 0.0,
                grad: Vector::zeros(n),
                hess: Matrix::zeros(n, n),
                chart: 0,
                eta: Vec::new(),
                inside_target: true,
                overlap: false,
                iterations: 0,
            });
        }
        let seeds = self.seeds(x);
        if seeds.is_empty() {
            return Err(Error::OutOfTube { point: x.iter().copied().collect() });
        }
        // Horizons are known to the conjugate localization tolerance.
        let slack = self.conj.loc_tol.max(1e-9);
        let mut best: Option<(f64, usize, Vec<f64>, usize)> = None;
        let mut components = Vec::new();
        let mut last_err = None;
        for (i, k, _) in seeds {
            let r = &self.records[i];
            match self.newton(r.chart, &r.eta, r.times[k], x, r.horizon) {
                Ok((eta, s, it)) => {
                    let horizon = self.horizon_near(r.chart, &eta);
                    if s < -slack || s > horizon + slack {
                        continue;
                    }
                    if !components.contains(&r.component) {
                        components.push(r.component);
                    }
                    if best.as_ref().map_or(true, |b| s < b.0) {
                        best = Some((s, r.chart, eta, it));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        let Some((s, chart, eta, iterations)) = best else {
            return Err(match last_err {
                Some(e @ Error::NoConvergence { .. }) => e,
                _ => Error::OutOfTube { point: x.iter().copied().collect() },
            });
        };
        let lay = self.flow.layout(Level::Riccati);
        let z = self.eval_flow.state_at(chart, &eta, s, Level::Riccati)?;
        let scale = self.flow.opts.costate_scale;
        Ok(FieldValue {
            t: s,
            grad: Vector::from_column_slice(&z[lay.p()]) / scale,
            hess: Matrix::from_column_slice(n, n, &z[lay.r()]) / scale,
            chart,
            eta,
            inside_target: false,
            overlap: components.len() > 1,
            iterations,
        })
    }

    /// Horizon of the stored record closest in parameters on the same chart.
    pub fn horizon_near(&self, chart: usize, eta: &[f64]) -> f64 {
        let ch = self.flow.geom.chart(chart).ok();
        let (dom, per) = ch.map(|c| (c.domain(), c.periodic())).unwrap_or_default();
        let dist = |a: &[f64]| -> f64 {
            a.iter()
                .zip(eta)
                .enumerate()
                .map(|(i, (u, v))| {
                    let mut d = (u - v).abs();
                    if per.get(i).copied().unwrap_or(false) {
                        let w = dom[i].1 - dom[i].0;
                        d = d.min(w - d);
                    }
                    d * d
                })
                .sum()
        };
        // Horizons of the two bracketing samples; the smaller one is conservative.
        let mut near: Vec<(f64, f64)> =
            self.records.iter().filter(|r| r.chart == chart).map(|r| (dist(&r.eta), r.horizon)).collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        let take = 2usize.pow(eta.len() as u32).min(near.len());
        near[..take].iter().map(|v| v.1).fold(f64::INFINITY, f64::min)
    }

    /// `t -> Y(eta, s0 - t)` and `t -> P(eta, s0 - t)` on `[0, s0]`.
    pub fn optimal_trajectory(&self, x0: &Vector, step: f64) -> Result<Trajectory> {
        if !(step > 0.0) {
            return Err(Error::InvalidInput("trajectory step must be positive".into()));
        }
        let v = self.eval(x0)?;
        if v.inside_target {
            return Err(Error::InvalidInput("start point lies in the target".into()));
        }
        let s0 = v.t;
        let lay = self.flow.layout(Level::Flow);
        let steps = ((s0 / step) - 1e-9).ceil().max(1.0) as usize;
        let h = s0 / steps as f64;
        let mut z = self.flow.initial_state(v.chart, &v.eta, Level::Flow)?;
        let mut ys = vec![Vector::from_column_slice(&z[lay.y()])];
        let mut ps = vec![Vector::from_column_slice(&z[lay.p()])];
        // Endpoint integrated with the eval step, as in eval.
        let total = self.eval_flow.state_at(v.chart, &v.eta, s0, Level::Flow)?;
        for _ in 0..steps {
            z = self.eval_flow.advance(Level::Flow, &z, h)?;
            ys.push(Vector::from_column_slice(&z[lay.y()]));
            ps.push(Vector::from_column_slice(&z[lay.p()]));
        }
        let last = ys.len() - 1;
        ys[last] = Vector::from_column_slice(&total[lay.y()]);
        ps[last] = Vector::from_column_slice(&total[lay.p()]);
        ys.reverse();
        ps.reverse();
        let scale = self.flow.opts.costate_scale;
        ps.iter_mut().for_each(|p| *p /= scale);
        let times = (0..=steps).map(|k| k as f64 * h).collect();
        Ok(Trajectory { times, states: ys, dual: ps, duration: s0, chart: v.chart, eta: v.eta })
    }

    /// `Y(eta_i, t)` over `count` boundary samples per chart.
    pub fn level_set(&self, t: f64, count: usize) -> Result<LevelSet> {
        if t < 0.0 {
            return Err(Error::InvalidInput("level must be nonnegative".into()));
        }
        let lay = self.flow.layout(Level::Flow);
        let samples = self.flow.geom.boundary_samples(count);
        type Row = (usize, Vec<f64>, Vector);
        let rows: Vec<Result<Option<Row>>> = samples
            .par_iter()
            .map(|s| {
                if self.horizon_near(s.chart, &s.eta) < t {
                    return Ok(None);
                }
                match self.eval_flow.state_at(s.chart, &s.eta, t, Level::Flow) {
                    Ok(z) => Ok(Some((s.chart, s.eta.clone(), Vector::from_column_slice(&z[lay.y()])))),
                    Err(Error::PetrovFailure { .. } | Error::KernelCostate { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut points = Vec::new();
        let mut skipped = Vec::new();
        for (s, r) in samples.iter().zip(rows) {
            match r? {
                Some(p) => points.push(p),
                None => skipped.push((s.chart, s.eta.clone())),
            }
        }
        Ok(LevelSet { t, points, skipped })
    }

    /// One row per index node: `record, chart, eta.., t, y.., p.., detYjt, normR`.
    pub fn write_nodes_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.n();
        let lay = self.flow.layout(Level::Riccati);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["record".to_string(), "chart".to_string()];
        header.extend((0..n - 1).map(|i| format!("eta{i}")));
        header.push("t".into());
        header.extend((0..n).map(|i| format!("y{i}")));
        header.extend((0..n).map(|i| format!("p{i}")));
        header.extend(["detYjt", "normR"].map(String::from));
        w.write_record(&header)?;
        for (i, r) in self.records.iter().enumerate() {
            for (k, z) in r.states.iter().enumerate() {
                let mut row = vec![i.to_string(), r.chart.to_string()];
                row.extend(r.eta.iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(r.times[k]));
                row.extend(z[..2 * n].iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(r.det[k]));
                let rm = Matrix::from_column_slice(n, n, &z[lay.r()]);
                row.push(fmt_f64(crate::linalg::sym_norm(&rm)));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Structured-text manifest of the parameters that produced the field.
    pub fn manifest(&self, scenario: &str) -> String {
        let f = &self.flow.opts;
        let truncated = self.records.iter().filter(|r| r.conjugate_time.is_some()).count();
        format!(
            "scenario = \"{scenario}\"\n\
             records = {}\n\
             truncated_records = {truncated}\n\
             samples_per_chart = {}\n\
             t_max = {}\n\
             margin = {}\n\
             step = {}\n\
             eval_step = {}\n\
             stride = {}\n\
             blowup_threshold = {}\n\
             conservation_tol = {}\n\
             det_tol = {}\n\
             loc_tol = {}\n\
             newton_tol = {}\n\
             capture_radius = {}\n",
            self.records.len(),
            self.opts.samples,
            fmt_f64(self.opts.t_max),
            fmt_f64(self.opts.margin),
            fmt_f64(f.step),
            fmt_f64(self.opts.eval_step),
            self.opts.stride,
            fmt_f64(f.blowup_threshold),
            fmt_f64(f.conservation_tol),
            fmt_f64(self.conj.det_tol),
            fmt_f64(self.conj.loc_tol),
            fmt_f64(self.opts.newton_tol),
            fmt_f64(self.capture_radius),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{ConstantField, ControlAffineSystem, HamiltonianModel, VectorField};
    use crate::linalg::vector;
    use crate::target::TargetGeometry;
    use std::sync::Arc;

    fn eikonal() -> HamiltonianModel {
        let cols = (0..2).map(|i| Arc::new(ConstantField::unit(2, i)) as Arc<dyn VectorField>).collect();
        HamiltonianModel::new(ControlAffineSystem::new(Arc::new(ConstantField::zero(2)), cols, 2.0).unwrap())
    }

    fn small(t_max: f64) -> FieldOptions {
        FieldOptions { samples: 64, t_max, ..FieldOptions::default() }
    }

    #[test]
    fn disk_field_values() {
        let m = eikonal();
        let g = TargetGeometry::disk([0.0, 0.0], 1.0).unwrap();
        let f = MinTimeField::build(&m, &g, &FlowOptions::default(), &ConjugateOptions::default(), small(2.0)).unwrap();
        let v = f.eval(&vector(&[2.0, 0.0])).unwrap();
        assert!((v.t - 1.0).abs() < 1e-9);
        assert!((&v.grad - vector(&[1.0, 0.0])).norm() < 1e-9);
        assert!((&v.hess - nalgebra::dmatrix![0.0, 0.0; 0.0, 0.5]).amax() < 1e-6);

        let inside = f.eval(&vector(&[0.9, 0.0])).unwrap();
        assert!(inside.inside_target && inside.t == 0.0);
        assert!(matches!(f.eval(&vector(&[5.0, 0.0])), Err(Error::OutOfTube { .. })));

        let v = f.eval(&vector(&[-1.3, 1.7])).unwrap();
        assert!((v.t - (1.3f64.hypot(1.7) - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn annulus_field_is_truncated_before_focus() {
        let m = eikonal();
        let g = TargetGeometry::annulus([0.0, 0.0], 1.0, 2.0).unwrap();
        let f = MinTimeField::build(&m, &g, &FlowOptions::default(), &ConjugateOptions::default(), small(2.0)).unwrap();
        for r in f.records().iter().filter(|r| r.chart == 0) {
            assert!((r.horizon - 0.95).abs() < 1e-3, "{}", r.horizon);
        }
        for r in f.records().iter().filter(|r| r.chart == 1) {
            assert!(r.conjugate_time.is_none());
            assert!((r.horizon - 2.0).abs() < 1e-12);
        }
        let v = f.eval(&vector(&[0.5, 0.0])).unwrap();
        assert!((v.t - 0.5).abs() < 1e-9);
        assert!((&v.grad - vector(&[-1.0, 0.0])).norm() < 1e-9);
        assert!(!v.overlap);
    }

    #[test]
    fn trajectories_end_on_the_boundary() {
        let m = eikonal();
        let g = TargetGeometry::annulus([0.0, 0.0], 1.0, 2.0).unwrap();
        let f = MinTimeField::build(&m, &g, &FlowOptions::default(), &ConjugateOptions::default(), small(2.0)).unwrap();
        let tr = f.optimal_trajectory(&vector(&[0.3, 0.0]), 1e-2).unwrap();
        assert!((tr.duration - 0.7).abs() < 1e-9);
        assert!((&tr.states[0] - vector(&[0.3, 0.0])).norm() < 1e-9);
        assert!((tr.states.last().unwrap() - vector(&[1.0, 0.0])).norm() < 1e-9);
        for p in &tr.dual {
            assert!((p - vector(&[-1.0, 0.0])).norm() < 1e-9);
        }
    }

    #[test]
    fn level_sets_are_circles() {
        let m = eikonal();
        let g = TargetGeometry::disk([0.0, 0.0], 1.0).unwrap();
        let f = MinTimeField::build(&m, &g, &FlowOptions::default(), &ConjugateOptions::default(), small(2.0)).unwrap();
        let ls = f.level_set(1.0, 32).unwrap();
        assert_eq!(ls.points.len(), 32);
        for (_, _, y) in &ls.points {
            assert!((y.norm() - 2.0).abs() < 1e-6);
        }
        let zero = f.level_set(0.0, 8).unwrap();
        for (s, (_, _, y)) in g.boundary_samples(8).iter().zip(&zero.points) {
            assert!((&s.xi - y).norm() < 1e-15);
        }
        let beyond = f.level_set(3.0, 8).unwrap();
        assert!(beyond.points.is_empty() && beyond.skipped.len() == 8);
    }

    #[test]
    fn manifest_and_nodes_export() {
        let m = eikonal();
        let g = TargetGeometry::disk([0.0, 0.0], 1.0).unwrap();
        let f = MinTimeField::build(&m, &g, &FlowOptions::default(), &ConjugateOptions::default(), small(0.5)).unwrap();
        let text = f.manifest("eikonal-disk");
        let parsed: toml::Table = toml::from_str(&text).unwrap();
        assert_eq!(parsed["records"].as_integer(), Some(64));
        let mut buf = Vec::new();
        f.write_nodes_csv(&mut buf).unwrap();
        let rows = String::from_utf8(buf).unwrap().lines().count() - 1;
        assert_eq!(rows, f.records().iter().map(|r| r.times.len()).sum::<usize>());
    }
}
