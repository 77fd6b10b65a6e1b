//! Conjugate times by determinant, rank and Riccati blow-up.

use std::io::Write;

use rayon::prelude::*;
use serde::Deserialize;

use crate::charflow::{fmt_f64, CharacteristicRecord, Characteristics, Level};
use crate::error::{Error, Result};
use crate::linalg::{rank, singular_values_ascending, Matrix, Vector};
use crate::target::BoundarySample;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConjugateOptions {
    /// Relative to `det Yjt(0)`.
    pub det_tol: f64,
    pub loc_tol: f64,
    /// Relative to `|Yj(0)|`.
    pub svd_tol: f64,
    pub h2_tol: f64,
    pub max_bisections: usize,
    /// Relative tolerance for the rank of `Yjt` in the derivative check.
    pub rank_tol: f64,
}

impl Default for ConjugateOptions {
    fn default() -> Self {
        Self { det_tol: 1e-10, loc_tol: 1e-6, svd_tol: 1e-8, h2_tol: 1e-8, max_bisections: 60, rank_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Determinant,
    Rank,
    Riccati,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Determinant => "determinant",
            Criterion::Rank => "rank",
            Criterion::Riccati => "riccati",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateReport {
    pub criterion: Criterion,
    pub conjugate_time: Option<f64>,
    pub bracket: Option<(f64, f64)>,
    /// `|det|`, the smallest singular value of `Yj`, or `|R|` at localization.
    pub witness: f64,
    pub chart: usize,
    pub eta: Vec<f64>,
    /// Repeated near-zeros within `loc_tol` of the reported time.
    pub clustered: bool,
    pub note: Option<String>,
}

impl ConjugateReport {
    fn none(criterion: Criterion, rec: &CharacteristicRecord, witness: f64) -> Self {
        Self {
            criterion,
            conjugate_time: None,
            bracket: None,
            witness,
            chart: rec.chart,
            eta: rec.eta.clone(),
            clustered: false,
            note: rec.truncation.as_ref().map(|t| format!("record truncated at t = {}: {}", t.t, t.reason)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetDerivativeReport {
    pub t: f64,
    pub det: f64,
    pub derivative: f64,
    pub rank: usize,
    /// The biconditional only says something where `Yjt` is singular.
    pub applicable: bool,
    pub consistent: bool,
}

pub struct ConjugateDetector<'a, 'b> {
    pub flow: &'b Characteristics<'a>,
    pub opts: ConjugateOptions,
}

impl<'a, 'b> ConjugateDetector<'a, 'b> {
    pub fn new(flow: &'b Characteristics<'a>, opts: ConjugateOptions) -> Self {
        Self { flow, opts }
    }

    fn require(rec: &CharacteristicRecord, level: Level) -> Result<()> {
        if rec.level() < level {
            return Err(Error::InvalidInput(format!("record level {:?} lacks {:?} data", rec.level(), level)));
        }
        Ok(())
    }

    /// Bisect `[t_k, t_{k+1}]` for the first time `hit` becomes true, re-integrating from node `k`.
    fn bisect(
        &self,
        rec: &CharacteristicRecord,
        k: usize,
        mut lo: f64,
        mut hi: f64,
        hit: impl Fn(&[f64]) -> bool,
    ) -> Result<(f64, f64)> {
        let t0 = rec.times[k];
        for _ in 0..self.opts.max_bisections {
            if hi - lo <= self.opts.loc_tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let z = self.flow.resume(rec, k, mid - t0)?;
            if hit(&z) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok((lo, hi))
    }

    pub fn detect_by_det(&self, rec: &CharacteristicRecord) -> Result<ConjugateReport> {
        Self::require(rec, Level::Variational)?;
        let thr = self.opts.det_tol * rec.det[0].abs();
        let det_of = |z: &[f64]| self.flow.oriented_det(rec, z);
        let Some(k) = (1..rec.len()).find(|&k| rec.det[k] <= thr) else {
            let w = rec.det.iter().fold(f64::INFINITY, |a, b| a.min(b.abs()));
            return Ok(ConjugateReport::none(Criterion::Determinant, rec, w));
        };
        let (lo, hi) = self.bisect(rec, k - 1, rec.times[k - 1], rec.times[k], |z| det_of(z) <= thr)?;
        let t_bar = 0.5 * (lo + hi);
        let witness = det_of(&self.flow.resume(rec, k - 1, t_bar - rec.times[k - 1])?).abs();

        let mut clustered = false;
        for j in 1..=4 {
            let s = hi + j as f64 * 0.25 * self.opts.loc_tol;
            let kk = last_node_before(rec, s);
            let z = self.flow.resume(rec, kk, s - rec.times[kk])?;
            if det_of(&z) > thr {
                clustered = true;
            }
        }
        Ok(ConjugateReport {
            criterion: Criterion::Determinant,
            conjugate_time: Some(t_bar),
            bracket: Some((lo, hi)),
            witness,
            chart: rec.chart,
            eta: rec.eta.clone(),
            clustered,
            note: None,
        })
    }

    fn sigma(&self, rec: &CharacteristicRecord, z: &[f64]) -> f64 {
        let lay = rec.layout;
        let yj = Matrix::from_column_slice(lay.n, lay.n - 1, &z[lay.yj()]);
        singular_values_ascending(&yj)[0]
    }

    fn sigma_at(&self, rec: &CharacteristicRecord, t: f64) -> Result<f64> {
        let k = last_node_before(rec, t);
        let z = self.flow.resume(rec, k, t - rec.times[k])?;
        Ok(self.sigma(rec, &z))
    }

    /// Requires the kernel of `H_pp` to be the costate line at every node.
    pub fn detect_by_rank(&self, rec: &CharacteristicRecord) -> Result<ConjugateReport> {
        Self::require(rec, Level::Partial)?;
        let model = self.flow.model;
        for k in 0..rec.len() {
            if !model.check_h2(&rec.y(k), &rec.p(k), self.opts.h2_tol)? {
                return Err(Error::H2Violation { node: k, t: rec.times[k] });
            }
        }
        let scale = crate::linalg::op_norm(&rec.yj(0).expect("partial level"));
        let thr = self.opts.svd_tol * scale;
        let sig: Vec<f64> = rec.states.iter().map(|z| self.sigma(rec, z)).collect();

        let mut found: Option<(usize, f64)> = None;
        for k in 1..rec.len() {
            if sig[k] <= thr {
                found = Some((k - 1, rec.times[k]));
                break;
            }
            // A dip between nodes can hide below the threshold.
            if k + 1 < rec.len() && sig[k] < sig[k - 1] && sig[k] <= sig[k + 1] {
                let (tmin, smin) = self.golden_min(rec, rec.times[k - 1], rec.times[k + 1])?;
                if smin <= thr {
                    let kk = last_node_before(rec, tmin);
                    found = Some((kk, tmin));
                    break;
                }
            }
        }
        let Some((k, t_hit)) = found else {
            let w = sig.iter().fold(f64::INFINITY, |a, b| a.min(*b));
            return Ok(ConjugateReport::none(Criterion::Rank, rec, w));
        };
        let (lo, hi) = self.bisect(rec, k, rec.times[k], t_hit, |z| self.sigma(rec, z) <= thr)?;
        let t_bar = 0.5 * (lo + hi);
        Ok(ConjugateReport {
            criterion: Criterion::Rank,
            conjugate_time: Some(t_bar),
            bracket: Some((lo, hi)),
            witness: self.sigma_at(rec, t_bar)?,
            chart: rec.chart,
            eta: rec.eta.clone(),
            clustered: false,
            note: None,
        })
    }

    fn golden_min(&self, rec: &CharacteristicRecord, mut a: f64, mut b: f64) -> Result<(f64, f64)> {
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let mut fc = self.sigma_at(rec, c)?;
        let mut fd = self.sigma_at(rec, d)?;
        for _ in 0..self.opts.max_bisections {
            if b - a <= 0.1 * self.opts.loc_tol {
                break;
            }
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = self.sigma_at(rec, c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = self.sigma_at(rec, d)?;
            }
        }
        Ok(if fc < fd { (c, fc) } else { (d, fd) })
    }

    /// Threshold crossing of `|R|`: a lower bound on the conjugate time.
    pub fn detect_by_riccati(&self, rec: &CharacteristicRecord) -> Result<ConjugateReport> {
        Self::require(rec, Level::Riccati)?;
        let thr = self.flow.opts.blowup_threshold;
        if let Some(b) = rec.blowup {
            return Ok(ConjugateReport {
                criterion: Criterion::Riccati,
                conjugate_time: Some(b.t_hi),
                bracket: Some((b.t_lo, b.t_hi)),
                witness: thr,
                chart: rec.chart,
                eta: rec.eta.clone(),
                clustered: false,
                note: None,
            });
        }
        if let Some(k) = rec.norm_r.iter().position(|v| *v >= thr) {
            let lo = if k > 0 { rec.times[k - 1] } else { 0.0 };
            return Ok(ConjugateReport {
                criterion: Criterion::Riccati,
                conjugate_time: Some(rec.times[k]),
                bracket: Some((lo, rec.times[k])),
                witness: rec.norm_r[k],
                chart: rec.chart,
                eta: rec.eta.clone(),
                clustered: false,
                note: None,
            });
        }
        let w = rec.norm_r.iter().fold(0.0_f64, |a, b| a.max(*b));
        Ok(ConjugateReport::none(Criterion::Riccati, rec, w))
    }

    /// Central difference of `det Yjt` at `t` and the rank of `Yjt(t)`.
    pub fn det_derivative_check(&self, rec: &CharacteristicRecord, t: f64, fd_step: f64) -> Result<DetDerivativeReport> {
        Self::require(rec, Level::Variational)?;
        if !(fd_step > 0.0) || t - fd_step < 0.0 || t + fd_step > rec.t_end() {
            return Err(Error::InvalidInput(format!("t = {t} is not interior for step {fd_step}")));
        }
        let at = |s: f64| -> Result<Vec<f64>> {
            let k = last_node_before(rec, s);
            self.flow.resume(rec, k, s - rec.times[k])
        };
        let z = at(t)?;
        let det = self.flow.oriented_det(rec, &z);
        let derivative =
            (self.flow.oriented_det(rec, &at(t + fd_step)?) - self.flow.oriented_det(rec, &at(t - fd_step)?)) / (2.0 * fd_step);
        let lay = rec.layout;
        let yjt = Matrix::from_column_slice(lay.n, lay.n, &z[lay.yjt()]);
        let r = rank(&yjt, self.opts.rank_tol);
        let n = lay.n;
        let applicable = r < n;
        let nonzero = derivative.abs() > 1e-6 * rec.det[0].abs();
        let consistent = !applicable || (nonzero == (r == n - 1));
        Ok(DetDerivativeReport { t, det, derivative, rank: r, applicable, consistent })
    }
}

/// Largest node index with `t_k <= t`.
pub(crate) fn last_node_before(rec: &CharacteristicRecord, t: f64) -> usize {
    match rec.times.binary_search_by(|s| s.total_cmp(&t)) {
        Ok(k) => k,
        Err(0) => 0,
        Err(k) => k - 1,
    }
    .min(rec.len() - 1)
}

/// One caustic point.
#[derive(Debug, Clone, PartialEq)]
pub struct CausticRow {
    pub chart: usize,
    pub eta: Vec<f64>,
    pub t_bar: f64,
    pub y: Vector,
}

/// Determinant detection over boundary samples; rows only where a conjugate time exists.
pub fn caustic_sweep(
    flow: &Characteristics<'_>,
    samples: &[BoundarySample],
    opts: &ConjugateOptions,
) -> Result<Vec<CausticRow>> {
    let rows: Vec<Result<Option<CausticRow>>> = samples
        .par_iter()
        .map(|s| {
            let rec = flow.variational_flow(s.chart, &s.eta)?;
            let det = ConjugateDetector::new(flow, opts.clone());
            let rep = det.detect_by_det(&rec)?;
            let Some(t_bar) = rep.conjugate_time else {
                return Ok(None);
            };
            let k = last_node_before(&rec, t_bar);
            let z = flow.resume(&rec, k, t_bar - rec.times[k])?;
            let y = Vector::from_column_slice(&z[rec.layout.y()]);
            Ok(Some(CausticRow { chart: s.chart, eta: s.eta.clone(), t_bar, y }))
        })
        .collect();
    let mut out = Vec::new();
    for r in rows {
        if let Some(row) = r? {
            out.push(row);
        }
    }
    Ok(out)
}

/// Columns `chart, eta.., t_bar, y..`.
pub fn write_caustic_csv<W: Write>(rows: &[CausticRow], n: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["chart".to_string()];
    header.extend((0..n - 1).map(|i| format!("eta{i}")));
    header.push("t_bar".into());
    header.extend((0..n).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.chart.to_string()];
        row.extend(r.eta.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(r.t_bar));
        row.extend(r.y.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charflow::FlowOptions;
    use crate::hamiltonian::{ConstantField, ControlAffineSystem, HamiltonianModel, VectorField};
    use crate::linalg::vector;
    use crate::target::TargetGeometry;
    use std::sync::Arc;

    fn eikonal() -> HamiltonianModel {
        let cols = (0..2).map(|i| Arc::new(ConstantField::unit(2, i)) as Arc<dyn VectorField>).collect();
        HamiltonianModel::new(ControlAffineSystem::new(Arc::new(ConstantField::zero(2)), cols, 2.0).unwrap())
    }

    fn opts(t_max: f64) -> FlowOptions {
        FlowOptions { t_max, ..FlowOptions::default() }
    }

    #[test]
    fn annulus_all_detectors_agree() {
        let m = eikonal();
        let ann = TargetGeometry::annulus([0.0, 0.0], 1.0, 2.0).unwrap();
        let flow = Characteristics::new(&m, &ann, opts(2.0)).unwrap();
        let det = ConjugateDetector::new(&flow, ConjugateOptions::default());
        let rec = flow.partial_variational_flow(0, &[0.7]).unwrap();
        let d = det.detect_by_det(&rec).unwrap();
        let r = det.detect_by_rank(&rec).unwrap();
        let td = d.conjugate_time.unwrap();
        let tr = r.conjugate_time.unwrap();
        assert!((td - 1.0).abs() <= 1e-3);
        assert!((td - tr).abs() <= 2e-6, "{td} {tr}");
        let (lo, hi) = d.bracket.unwrap();
        assert!(hi - lo <= 1e-6 && lo <= td && td <= hi);
        assert!(!d.clustered);

        let ric = flow.riccati_flow(0, &[0.7]).unwrap();
        let q = det.detect_by_riccati(&ric).unwrap();
        let tq = q.conjugate_time.unwrap();
        assert!(tq < td && td - tq <= 2e-6, "{tq} vs {td}");
    }

    #[test]
    fn disk_has_no_conjugate_time() {
        let m = eikonal();
        let disk = TargetGeometry::disk([0.0, 0.0], 1.0).unwrap();
        let flow = Characteristics::new(&m, &disk, opts(10.0)).unwrap();
        let det = ConjugateDetector::new(&flow, ConjugateOptions::default());
        let rec = flow.riccati_flow(0, &[2.0]).unwrap();
        assert!(det.detect_by_det(&rec).unwrap().conjugate_time.is_none());
        assert!(det.detect_by_rank(&rec).unwrap().conjugate_time.is_none());
        assert!(det.detect_by_riccati(&rec).unwrap().conjugate_time.is_none());
    }

    #[test]
    fn single_field_violates_h2() {
        let sys = ControlAffineSystem::new(
            Arc::new(ConstantField::zero(2)),
            vec![Arc::new(ConstantField::unit(2, 0))],
            2.0,
        )
        .unwrap();
        let m = HamiltonianModel::new(sys);
        let disk = TargetGeometry::disk([0.0, 0.0], 1.0).unwrap();
        let flow = Characteristics::new(&m, &disk, opts(0.5)).unwrap();
        let rec = flow.partial_variational_flow(0, &[0.2]).unwrap();
        let det = ConjugateDetector::new(&flow, ConjugateOptions::default());
        assert!(matches!(det.detect_by_rank(&rec), Err(Error::H2Violation { node: 0, .. })));
    }

    #[test]
    fn determinant_derivative_examples() {
        let m = eikonal();
        let ann = TargetGeometry::annulus([0.0, 0.0], 1.0, 2.0).unwrap();
        let flow = Characteristics::new(&m, &ann, opts(2.0)).unwrap();
        let det = ConjugateDetector::new(&flow, ConjugateOptions::default());
        let rec = flow.variational_flow(0, &[0.0]).unwrap();
        let at1 = det.det_derivative_check(&rec, 1.0, 1e-4).unwrap();
        assert!((at1.derivative + 1.0).abs() < 1e-6);
        assert_eq!(at1.rank, 1);
        assert!(at1.applicable && at1.consistent);
        let half = det.det_derivative_check(&rec, 0.5, 1e-4).unwrap();
        assert!((half.derivative + 1.0).abs() < 1e-6);

        let disk = TargetGeometry::disk([0.0, 0.0], 1.0).unwrap();
        let flow = Characteristics::new(&m, &disk, opts(5.0)).unwrap();
        let det = ConjugateDetector::new(&flow, ConjugateOptions::default());
        let rec = flow.variational_flow(0, &[0.0]).unwrap();
        let at3 = det.det_derivative_check(&rec, 3.0, 1e-4).unwrap();
        assert!((at3.derivative - 1.0).abs() < 1e-6);
        assert_eq!(at3.rank, 2);
        assert!(!at3.applicable && at3.consistent);
    }

    #[test]
    fn rank_detector_finds_dip_between_nodes() {
        // With a coarse step the exact zero at t = 1 falls between nodes.
        let m = eikonal();
        let ann = TargetGeometry::annulus([0.0, 0.0], 1.0, 2.0).unwrap();
        let flow = Characteristics::new(&m, &ann, FlowOptions { step: 0.3, t_max: 2.0, ..FlowOptions::default() })
            .unwrap();
        let det = ConjugateDetector::new(&flow, ConjugateOptions::default());
        let rec = flow.partial_variational_flow(0, &[0.0]).unwrap();
        let r = det.detect_by_rank(&rec).unwrap();
        assert!((r.conjugate_time.unwrap() - 1.0).abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn caustic_rows_sit_at_the_focus() {
        let m = eikonal();
        let ann = TargetGeometry::annulus([0.0, 0.0], 1.0, 2.0).unwrap();
        let flow = Characteristics::new(&m, &ann, opts(1.5)).unwrap();
        let samples: Vec<_> = ann.boundary_samples(8);
        let rows = caustic_sweep(&flow, &samples, &ConjugateOptions::default()).unwrap();
        // Outer-circle rays diverge; inner ones all focus at the center.
        assert_eq!(rows.len(), 8);
        for r in &rows {
            assert_eq!(r.chart, 0);
            assert!((r.t_bar - 1.0).abs() < 1e-3);
            assert!(r.y.norm() < 1e-5);
        }
        let mut buf = Vec::new();
        write_caustic_csv(&rows, 2, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("chart,eta0,t_bar,y0,y1\n"));
        let _ = vector(&[0.0]);
    }
}
