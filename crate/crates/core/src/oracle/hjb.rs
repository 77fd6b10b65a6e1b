//! Semi-Lagrangian value iteration for the minimum time function on a
//! Cartesian grid.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::charflow::fmt_f64;
use crate::error::{Error, Result};
use crate::hamiltonian::HamiltonianModel;
use crate::linalg::{Matrix, Vector};
use crate::target::TargetGeometry;

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub h: f64,
    pub n_u: usize,
    /// Time step of the update; `None` uses `h`.
    pub tau: Option<f64>,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { lo: vec![-3.0, -3.0], hi: vec![3.0, 3.0], h: 0.02, n_u: 64, tau: None, tol: 1e-10, max_sweeps: 500 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepStats {
    pub sweeps: usize,
    pub residual: f64,
    /// Cell updates that raised a value. Value iteration from `T = inf` never does this.
    pub increases: usize,
    pub finite_cells: usize,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

/// Grid values of the minimum time function; `T = inf` where unreachable.
#[derive(Debug, Clone)]
pub struct HjbGrid {
    pub lo: Vec<f64>,
    pub h: f64,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    pub n_u: usize,
    pub tau: f64,
    pub stats: SweepStats,
}

/// Stand-in for `inf` during iteration.
const UNREACHED: f64 = 1e10;
/// Converged values above this are reported as `inf`.
const UNREACHED_CUTOFF: f64 = 1e7;

/// Unit control directions on the sphere `S^{m-1}`.
pub fn control_directions(m: usize, n_u: usize) -> Result<Vec<Vector>> {
    match m {
        1 => Ok(vec![Vector::from_element(1, 1.0), Vector::from_element(1, -1.0)]),
        2 => Ok((0..n_u)
            .map(|k| {
                let a = TAU * k as f64 / n_u as f64;
                Vector::from_vec(vec![a.cos(), a.sin()])
            })
            .collect()),
        3 => {
            // Fibonacci lattice.
            let golden = PI * (3.0 - 5f64.sqrt());
            Ok((0..n_u)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / n_u as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = golden * k as f64;
                    Vector::from_vec(vec![r * a.cos(), r * a.sin(), z])
                })
                .collect())
        }
        _ => Err(Error::InvalidInput(format!("control discretization supports m <= 3, got {m}"))),
    }
}

/// Control count at spacing `h` keeping the direction error proportional to
/// the grid error of `n_u` directions at spacing `h_ref`. Rounded to a multiple of four.
pub fn scaled_control_count(n_u: usize, h_ref: f64, h: f64) -> usize {
    let scaled = n_u as f64 * (h_ref / h).sqrt();
    ((scaled / 4.0).round() as usize).max(1) * 4
}

impl HjbGrid {
    pub fn n(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn hi(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.dims).map(|(l, d)| l + self.h * (*d - 1) as f64).collect()
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.n()];
        for (d, i) in idx.iter_mut().enumerate() {
            *i = flat % self.dims[d];
            flat /= self.dims[d];
        }
        idx
    }

    pub fn point(&self, flat: usize) -> Vector {
        let idx = self.multi_index(flat);
        Vector::from_iterator(self.n(), idx.iter().enumerate().map(|(d, i)| self.lo[d] + self.h * *i as f64))
    }

    /// Multilinear interpolation of `values`; `None` outside the box or next to an infinite node.
    pub fn interpolate(&self, x: &[f64]) -> Option<f64> {
        interpolate(&self.lo, self.h, &self.dims, &self.values, x)
    }

    pub fn value_at(&self, x: &Vector) -> Option<f64> {
        self.interpolate(x.as_slice())
    }

    /// Semi-Lagrangian Gauss-Seidel iteration with `2^n` alternating orderings.
    pub fn solve(model: &HamiltonianModel, geom: &TargetGeometry, opts: &GridOptions) -> Result<Self> {
        let grid = Self::iterate(model, geom, opts)?;
        if grid.stats.converged {
            Ok(grid)
        } else {
            Err(Error::NotConverged { sweeps: grid.stats.sweeps, residual: grid.stats.residual })
        }
    }

    /// Runs at most `max_sweeps` sweeps; `stats.converged` tells whether the tolerance was met.
    pub fn iterate(model: &HamiltonianModel, geom: &TargetGeometry, opts: &GridOptions) -> Result<Self> {
        let n = model.n();
        if geom.n() != n || opts.lo.len() != n || opts.hi.len() != n {
            return Err(Error::InvalidInput(format!("grid box must have {n} axes matching the system")));
        }
        if !(opts.h > 0.0) || opts.n_u == 0 {
            return Err(Error::InvalidInput("grid spacing and control count must be positive".into()));
        }
        if n > 3 {
            return Err(Error::InvalidInput("grid oracle supports n <= 3".into()));
        }
        let tau = opts.tau.unwrap_or(opts.h);
        let dims: Vec<usize> = opts
            .lo
            .iter()
            .zip(&opts.hi)
            .map(|(l, u)| ((u - l) / opts.h).round() as usize + 1)
            .collect();
        if dims.iter().any(|d| *d < 2) {
            return Err(Error::InvalidInput("grid box must span at least one cell per axis".into()));
        }
        let total: usize = dims.iter().product();
        let mut grid = HjbGrid {
            lo: opts.lo.clone(),
            h: opts.h,
            dims: dims.clone(),
            values: vec![UNREACHED; total],
            n_u: opts.n_u,
            tau,
            stats: SweepStats::default(),
        };

        let sys = model.system();
        let controls = control_directions(sys.m(), opts.n_u)?;
        let constant_velocity = sys.is_state_independent();
        let velocity_table = |x: &Vector| -> Vec<Vector> {
            let h = sys.drift(x);
            let f: Matrix = sys.control_matrix(x);
            controls.iter().map(|u| &h + &f * u).collect()
        };
        let shared = if constant_velocity { Some(velocity_table(&Vector::zeros(n))) } else { None };

        // Static data: target cells and the best direct hit into K.
        let mut fixed = vec![false; total];
        let mut hit = vec![f64::INFINITY; total];
        for c in 0..total {
            let x = grid.point(c);
            let b = geom.signed_distance(&x);
            if b <= 0.0 {
                fixed[c] = true;
                grid.values[c] = 0.0;
                continue;
            }
            let vels = shared.clone().unwrap_or_else(|| velocity_table(&x));
            let vmax = vels.iter().fold(0.0_f64, |a, v| a.max(v.norm()));
            if b > tau * vmax {
                continue;
            }
            for v in &vels {
                let y = &x + v * tau;
                if geom.signed_distance(&y) > 0.0 {
                    continue;
                }
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..50 {
                    let mid = 0.5 * (lo + hi);
                    if geom.signed_distance(&(&x + v * (tau * mid))) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hit[c] = hit[c].min(hi * tau);
            }
        }
        let per_cell = if constant_velocity {
            None
        } else {
            Some((0..total).map(|c| velocity_table(&grid.point(c))).collect::<Vec<_>>())
        };

        let stencils = shared
            .as_ref()
            .map(|vels| vels.iter().map(|v| Stencil::new((v * (tau / opts.h)).as_slice(), &dims)).collect::<Vec<_>>());

        let orderings = 1usize << n;
        let mut quiet = 0usize;
        let mut shift = [0.0; 3];
        for sweep in 0..opts.max_sweeps {
            let flip = sweep % orderings;
            let mut residual = 0.0_f64;
            for ord in 0..total {
                // Mixed-radix walk with axes reversed according to `flip`.
                let mut rem = ord;
                let mut c = 0;
                let mut stride = 1;
                let mut idx = [0usize; 3];
                for d in 0..n {
                    let mut i = rem % dims[d];
                    rem /= dims[d];
                    if flip >> d & 1 == 1 {
                        i = dims[d] - 1 - i;
                    }
                    idx[d] = i;
                    c += i * stride;
                    stride *= dims[d];
                }
                if fixed[c] {
                    continue;
                }
                let mut best = hit[c].min(UNREACHED);
                match (&stencils, &per_cell) {
                    (Some(st), _) => {
                        for s in st {
                            if let Some(t) = s.update(tau, &idx[..n], &dims, c, &grid.values) {
                                best = best.min(t);
                            }
                        }
                    }
                    (None, Some(p)) => {
                        for v in &p[c] {
                            for d in 0..n {
                                shift[d] = tau * v[d] / grid.h;
                            }
                            if let Some(t) = Stencil::new(&shift[..n], &dims).update(tau, &idx[..n], &dims, c, &grid.values) {
                                best = best.min(t);
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                let old = grid.values[c];
                if best > old {
                    grid.stats.increases += 1;
                }
                residual = residual.max((old - best).abs());
                grid.values[c] = best;
            }
            grid.stats.sweeps = sweep + 1;
            grid.stats.residual = residual;
            grid.stats.residual_history.push(residual);
            quiet = if residual < opts.tol { quiet + 1 } else { 0 };
            if quiet >= orderings {
                grid.stats.converged = true;
                break;
            }
        }
        for v in &mut grid.values {
            if *v > UNREACHED_CUTOFF {
                *v = f64::INFINITY;
            }
        }
        grid.stats.finite_cells = grid.values.iter().filter(|v| v.is_finite()).count();
        Ok(grid)
    }

    /// Structured-text header with box and spacing.
    pub fn header(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", ");
        let dims = self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ");
        format!(
            "lo = [{}]\nhi = [{}]\nh = {}\ndims = [{dims}]\nn_u = {}\ntau = {}\nsweeps = {}\nresidual = {}\nincreases = {}\n",
            list(&self.lo),
            list(&self.hi()),
            fmt_f64(self.h),
            self.n_u,
            fmt_f64(self.tau),
            self.stats.sweeps,
            fmt_f64(self.stats.residual),
            self.stats.increases,
        )
    }

    /// Rows `x0, .., T` in flat index order; unreachable cells hold `inf`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.n()).map(|d| format!("x{d}")).collect();
        header.push("T".into());
        w.write_record(&header)?;
        for c in 0..self.len() {
            let x = self.point(c);
            let mut row: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
            row.push(fmt_f64(self.values[c]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`HjbGrid::header`] and [`HjbGrid::write_csv`].
    pub fn read(header: &str, csv_data: impl BufRead) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            lo: Vec<f64>,
            h: f64,
            dims: Vec<usize>,
            n_u: usize,
            tau: f64,
            #[serde(default)]
            sweeps: usize,
            #[serde(default)]
            residual: f64,
            #[serde(default)]
            increases: usize,
            #[allow(dead_code)]
            hi: Option<Vec<f64>>,
        }
        let hd: Header = toml::from_str(header).map_err(|e| Error::Load(format!("grid header: {e}")))?;
        if hd.lo.len() != hd.dims.len() {
            return Err(Error::Load("grid header: lo and dims disagree".into()));
        }
        let total: usize = hd.dims.iter().product();
        let mut rdr = csv::Reader::from_reader(csv_data);
        let mut values = Vec::with_capacity(total);
        for rec in rdr.records() {
            let rec = rec?;
            let t = rec
                .get(hd.dims.len())
                .ok_or_else(|| Error::Load("grid csv: missing T column".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Load(format!("grid csv: {e}")))?;
            values.push(t);
        }
        if values.len() != total {
            return Err(Error::Load(format!("grid csv has {} rows, header expects {total}", values.len())));
        }
        let finite_cells = values.iter().filter(|v| v.is_finite()).count();
        Ok(Self {
            lo: hd.lo,
            h: hd.h,
            dims: hd.dims,
            values,
            n_u: hd.n_u,
            tau: hd.tau,
            stats: SweepStats {
                sweeps: hd.sweeps,
                residual: hd.residual,
                increases: hd.increases,
                finite_cells,
                converged: true,
                residual_history: Vec::new(),
            },
        })
    }
}

/// Multilinear weights for a displacement measured in cells, with the
/// weight on the departure cell split off.
struct Stencil {
    offsets: [isize; 8],
    weights: [f64; 8],
    len: usize,
    self_weight: f64,
    dmin: [isize; 3],
    dmax: [isize; 3],
}

impl Stencil {
    fn new(shift: &[f64], dims: &[usize]) -> Self {
        let n = dims.len();
        let mut base = [0isize; 3];
        let mut frac = [0.0; 3];
        for d in 0..n {
            let f = shift[d].floor();
            base[d] = f as isize;
            frac[d] = shift[d] - f;
        }
        let mut st = Stencil {
            offsets: [0; 8],
            weights: [0.0; 8],
            len: 0,
            self_weight: 0.0,
            dmin: [0; 3],
            dmax: [0; 3],
        };
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut off = 0isize;
            let mut stride = 1isize;
            let mut delta = [0isize; 3];
            for d in 0..n {
                let up = (corner >> d & 1) as isize;
                w *= if up == 1 { frac[d] } else { 1.0 - frac[d] };
                delta[d] = base[d] + up;
                off += delta[d] * stride;
                stride *= dims[d] as isize;
            }
            if w == 0.0 {
                continue;
            }
            for (d, k) in delta[..n].iter().enumerate() {
                st.dmin[d] = st.dmin[d].min(*k);
                st.dmax[d] = st.dmax[d].max(*k);
            }
            if delta[..n].iter().all(|k| *k == 0) {
                st.self_weight = w;
            } else {
                st.offsets[st.len] = off;
                st.weights[st.len] = w;
                st.len += 1;
            }
        }
        st
    }

    /// Local fixed point of `T_c = tau + sum_k w_k T_k + w_self T_c`.
    fn update(&self, tau: f64, idx: &[usize], dims: &[usize], c: usize, values: &[f64]) -> Option<f64> {
        for (d, i) in idx.iter().enumerate() {
            let i = *i as isize;
            if i + self.dmin[d] < 0 || i + self.dmax[d] > dims[d] as isize - 1 {
                return None;
            }
        }
        if self.len == 0 {
            return None;
        }
        let mut acc = tau;
        for k in 0..self.len {
            acc += self.weights[k] * values[(c as isize + self.offsets[k]) as usize];
        }
        Some((acc / (1.0 - self.self_weight)).min(UNREACHED))
    }
}

fn interpolate(lo: &[f64], h: f64, dims: &[usize], values: &[f64], x: &[f64]) -> Option<f64> {
    let n = dims.len();
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for d in 0..n {
        let s = (x[d] - lo[d]) / h;
        if !(s >= 0.0) || s > (dims[d] - 1) as f64 {
            return None;
        }
        let i = (s.floor() as usize).min(dims[d] - 2);
        base[d] = i;
        frac[d] = s - i as f64;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << n) {
        let mut w = 1.0;
        let mut flat = 0;
        let mut stride = 1;
        for d in 0..n {
            let up = corner >> d & 1;
            w *= if up == 1 { frac[d] } else { 1.0 - frac[d] };
            flat += (base[d] + up) * stride;
            stride *= dims[d];
        }
        if w == 0.0 {
            continue;
        }
        let v = values[flat];
        if !v.is_finite() {
            return None;
        }
        acc += w * v;
    }
    Some(acc)
}
