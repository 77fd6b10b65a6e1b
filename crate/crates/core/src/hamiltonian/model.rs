//! Hamiltonian of a control-affine differential inclusion.
//!
//! The admissible velocities at `x` are `h(x) + F(x) u` with `|u| <= 1`, and
//! `H(x, p) = sup <-v, p> = <-h(x), p> + |F(x)^T p|`.

use std::sync::Arc;

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{singular_values_ascending, Matrix, Vector};

use super::fields::VectorField;

pub const DEFAULT_ZERO_P_GUARD: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ControlAffineSystem {
    n: usize,
    drift: Arc<dyn VectorField>,
    columns: Vec<Arc<dyn VectorField>>,
    rho: f64,
}

impl ControlAffineSystem {
    pub fn new(drift: Arc<dyn VectorField>, columns: Vec<Arc<dyn VectorField>>, rho: f64) -> Result<Self> {
        let n = drift.dim();
        if n == 0 {
            return Err(Error::InvalidInput("state dimension must be positive".into()));
        }
        if columns.is_empty() {
            return Err(Error::InvalidInput("at least one control column is required".into()));
        }
        if let Some(bad) = columns.iter().find(|c| c.dim() != n) {
            return Err(Error::InvalidInput(format!(
                "control column has dimension {}, drift has {n}",
                bad.dim()
            )));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidInput(format!("growth bound rho must be positive, got {rho}")));
        }
        Ok(Self { n, drift, columns, rho })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of control columns.
    pub fn m(&self) -> usize {
        self.columns.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn drift(&self, x: &Vector) -> Vector {
        self.drift.value(x)
    }

    /// `F(x)` as an `n x m` matrix.
    pub fn control_matrix(&self, x: &Vector) -> Matrix {
        let mut f = Matrix::zeros(self.n, self.m());
        for (i, c) in self.columns.iter().enumerate() {
            f.set_column(i, &c.value(x));
        }
        f
    }

    /// `h(x) + F(x) u`.
    pub fn velocity(&self, x: &Vector, u: &Vector) -> Vector {
        self.drift(x) + self.control_matrix(x) * u
    }

    /// True when neither `h` nor `F` depends on the state.
    pub fn is_state_independent(&self) -> bool {
        self.drift.is_constant() && self.columns.iter().all(|c| c.is_constant())
    }

    /// Sampled check of `|h(x)| + sum |f_i(x)| <= rho (1 + |x|)`.
    pub fn check_growth(&self, x: &Vector) -> Result<()> {
        let value = self.drift(x).norm() + self.columns.iter().map(|c| c.value(x).norm()).sum::<f64>();
        let bound = self.rho * (1.0 + x.norm());
        if !value.is_finite() || value > bound {
            return Err(Error::GrowthViolation { point: x.iter().copied().collect(), value, bound });
        }
        Ok(())
    }
}

/// Second derivatives of `H`. `xp` is the derivative of `grad_p` in `x`,
/// `px` the derivative of `grad_x` in `p`, so `px = xp^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    pub xx: Matrix,
    pub xp: Matrix,
    pub px: Matrix,
    pub pp: Matrix,
}

/// Value, gradients and optionally Hessian blocks from one evaluation pass.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub value: f64,
    pub grad_p: Vector,
    pub grad_x: Vector,
    pub hess: Option<HessianBlocks>,
}

#[derive(Debug, Clone)]
pub struct HamiltonianModel {
    system: Arc<ControlAffineSystem>,
    zero_p_guard: f64,
}

impl HamiltonianModel {
    pub fn new(system: ControlAffineSystem) -> Self {
        Self { system: Arc::new(system), zero_p_guard: DEFAULT_ZERO_P_GUARD }
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.zero_p_guard = guard;
        self
    }

    pub fn system(&self) -> &ControlAffineSystem {
        &self.system
    }

    pub fn n(&self) -> usize {
        self.system.n
    }

    pub fn zero_p_guard(&self) -> f64 {
        self.zero_p_guard
    }

    fn check_inputs(&self, x: &Vector, p: &Vector) -> Result<()> {
        if x.len() != self.n() || p.len() != self.n() {
            return Err(Error::InvalidInput(format!(
                "expected state and costate of length {}, got {} and {}",
                self.n(),
                x.len(),
                p.len()
            )));
        }
        ensure_finite("state", x.as_slice())?;
        ensure_finite("costate", p.as_slice())
    }

    pub fn eval(&self, x: &Vector, p: &Vector) -> Result<f64> {
        self.check_inputs(x, p)?;
        let h = self.system.drift(x);
        let q = self.system.control_matrix(x).transpose() * p;
        let value = -h.dot(p) + q.norm();
        ensure_finite("H(x, p)", &[value])?;
        Ok(value)
    }

    pub fn grad_p(&self, x: &Vector, p: &Vector) -> Result<Vector> {
        Ok(self.derivatives(x, p, false)?.grad_p)
    }

    pub fn grad_x(&self, x: &Vector, p: &Vector) -> Result<Vector> {
        Ok(self.derivatives(x, p, false)?.grad_x)
    }

    pub fn hess(&self, x: &Vector, p: &Vector) -> Result<HessianBlocks> {
        Ok(self.derivatives(x, p, true)?.hess.expect("requested"))
    }

    /// One shared pass over `h`, `F` and their derivatives.
    pub fn derivatives(&self, x: &Vector, p: &Vector, with_hessian: bool) -> Result<Derivatives> {
        self.check_inputs(x, p)?;
        let guard = self.zero_p_guard;
        let pn = p.norm();
        if pn < guard {
            return Err(Error::SingularCostate { norm: pn, guard });
        }
        let sys = &*self.system;
        let n = sys.n;
        let m = sys.m();

        let h = sys.drift.value(x);
        let f = sys.control_matrix(x);
        let q = f.transpose() * p;
        let qn = q.norm();
        if qn < guard {
            return Err(Error::KernelCostate { norm: qn, guard });
        }
        let qhat = &q / qn;

        let value = -h.dot(p) + qn;
        let grad_p = -&h + &f * &qhat;

        if sys.is_state_independent() {
            let hess = with_hessian.then(|| {
                let proj = (Matrix::identity(m, m) - &qhat * qhat.transpose()) / qn;
                let pp = &f * proj * f.transpose();
                let pp = (&pp + pp.transpose()) * 0.5;
                HessianBlocks { xx: Matrix::zeros(n, n), xp: Matrix::zeros(n, n), px: Matrix::zeros(n, n), pp }
            });
            ensure_finite("grad_p H", grad_p.as_slice())?;
            return Ok(Derivatives { value, grad_p, grad_x: Vector::zeros(n), hess });
        }

        let dh = sys.drift.jacobian(x);
        // Rows of jq are p^T Df_i, the x-gradient of q_i.
        let mut jq = Matrix::zeros(m, n);
        let mut dfs = Vec::with_capacity(m);
        for (i, c) in sys.columns.iter().enumerate() {
            let df = c.jacobian(x);
            let row = df.transpose() * p;
            jq.set_row(i, &row.transpose());
            dfs.push(df);
        }
        let grad_x = -dh.transpose() * p + jq.transpose() * &qhat;

        let hess = if with_hessian {
            let proj = (Matrix::identity(m, m) - &qhat * qhat.transpose()) / qn;
            let pp = &f * &proj * f.transpose();

            let mut xp = -&dh + &f * &proj * &jq;
            for (i, df) in dfs.iter().enumerate() {
                xp += df * qhat[i];
            }

            let mut xx = jq.transpose() * &proj * &jq;
            if !sys.drift.is_affine() {
                for (k, hk) in sys.drift.hessians(x).iter().enumerate() {
                    xx -= hk * p[k];
                }
            }
            for (i, c) in sys.columns.iter().enumerate() {
                if c.is_affine() {
                    continue;
                }
                for (k, hk) in c.hessians(x).iter().enumerate() {
                    xx += hk * (qhat[i] * p[k]);
                }
            }
            let xx = (&xx + xx.transpose()) * 0.5;
            let pp = (&pp + pp.transpose()) * 0.5;
            let px = xp.transpose();
            Some(HessianBlocks { xx, xp, px, pp })
        } else {
            None
        };

        ensure_finite("grad_p H", grad_p.as_slice())?;
        ensure_finite("grad_x H", grad_x.as_slice())?;
        Ok(Derivatives { value, grad_p, grad_x, hess })
    }

    /// Kernel of `H_pp` is exactly the line spanned by `p`.
    pub fn check_h2(&self, x: &Vector, p: &Vector, tol: f64) -> Result<bool> {
        let pp = self.hess(x, p)?.pp;
        let s = singular_values_ascending(&pp);
        let top = s.last().copied().unwrap_or(0.0);
        let scale = tol * top;
        let smallest = s[0];
        let second = if s.len() > 1 { s[1] } else { top };
        let kernel_ok = (&pp * p).norm() <= scale * p.norm();
        Ok(smallest <= scale && second > scale && kernel_ok)
    }

    /// Largest `-lambda_min(H_xx) / |p|` over the given sample pairs.
    pub fn semiconvexity_constant(&self, samples: &[(Vector, Vector)]) -> Result<f64> {
        let mut c = 0.0_f64;
        for (x, p) in samples {
            let xx = self.hess(x, p)?.xx;
            let lo = crate::linalg::sym_eigenvalues(&xx)[0];
            c = c.max(-lo / p.norm());
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::fields::{ConstantField, FnField, LinearField, PolynomialField, Monomial};
    use crate::linalg::vector;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn identity_columns(n: usize) -> Vec<Arc<dyn VectorField>> {
        (0..n).map(|i| Arc::new(ConstantField::unit(n, i)) as Arc<dyn VectorField>).collect()
    }

    fn eikonal() -> HamiltonianModel {
        let sys = ControlAffineSystem::new(Arc::new(ConstantField::zero(2)), identity_columns(2), 2.0).unwrap();
        HamiltonianModel::new(sys)
    }

    fn zermelo(hx: f64) -> HamiltonianModel {
        let sys =
            ControlAffineSystem::new(Arc::new(ConstantField::new(vector(&[hx, 0.0]))), identity_columns(2), 4.0)
                .unwrap();
        HamiltonianModel::new(sys)
    }

    /// Drift and columns that all depend on the state, with polynomial curvature.
    fn curved() -> HamiltonianModel {
        let drift = PolynomialField::new(
            2,
            vec![
                vec![Monomial { coef: 0.3, powers: vec![0, 2] }, Monomial { coef: 0.1, powers: vec![1, 0] }],
                vec![Monomial { coef: -0.2, powers: vec![1, 1] }],
            ],
        )
        .unwrap();
        let f1 = PolynomialField::new(
            2,
            vec![
                vec![Monomial { coef: 1.0, powers: vec![0, 0] }, Monomial { coef: 0.5, powers: vec![2, 0] }],
                vec![Monomial { coef: 0.2, powers: vec![0, 1] }],
            ],
        )
        .unwrap();
        let f2 = LinearField::new(dmatrix![0.0, 0.1; -0.3, 0.0], vector(&[0.0, 1.0])).unwrap();
        let sys = ControlAffineSystem::new(Arc::new(drift), vec![Arc::new(f1), Arc::new(f2)], 100.0).unwrap();
        HamiltonianModel::new(sys)
    }

    fn fd_grad(f: impl Fn(&Vector) -> f64, z: &Vector, step: f64) -> Vector {
        Vector::from_iterator(
            z.len(),
            (0..z.len()).map(|j| {
                let mut a = z.clone();
                let mut b = z.clone();
                a[j] += step;
                b[j] -= step;
                (f(&a) - f(&b)) / (2.0 * step)
            }),
        )
    }

    fn fd_jac(f: impl Fn(&Vector) -> Vector, z: &Vector, step: f64) -> Matrix {
        let n = z.len();
        let mut out = Matrix::zeros(f(z).len(), n);
        for j in 0..n {
            let mut a = z.clone();
            let mut b = z.clone();
            a[j] += step;
            b[j] -= step;
            out.set_column(j, &((f(&a) - f(&b)) / (2.0 * step)));
        }
        out
    }

    #[test]
    fn eikonal_values() {
        let m = eikonal();
        let x = vector(&[0.0, 0.0]);
        assert!((m.eval(&x, &vector(&[3.0, 4.0])).unwrap() - 5.0).abs() < 1e-15);
        assert_eq!(m.eval(&x, &vector(&[0.0, 0.0])).unwrap(), 0.0);
        let g = m.grad_p(&x, &vector(&[3.0, 4.0])).unwrap();
        assert!((g - vector(&[0.6, 0.8])).norm() < 1e-15);
        assert_eq!(m.grad_x(&vector(&[1.3, -2.0]), &vector(&[3.0, 4.0])).unwrap(), vector(&[0.0, 0.0]));

        let blocks = m.hess(&x, &vector(&[0.0, 2.0])).unwrap();
        assert!((&blocks.pp - dmatrix![0.5, 0.0; 0.0, 0.0]).norm() < 1e-15);
        assert_eq!(blocks.xx, Matrix::zeros(2, 2));
        assert_eq!(blocks.xp, Matrix::zeros(2, 2));
        let p = vector(&[3.0, 4.0]);
        assert!((m.hess(&x, &p).unwrap().pp * &p).norm() < 1e-15);
    }

    #[test]
    fn zermelo_values() {
        let m = zermelo(0.5);
        let x = vector(&[-4.0, 7.0]);
        let p = vector(&[1.0, 0.0]);
        assert!((m.eval(&x, &p).unwrap() - 0.5).abs() < 1e-15);
        assert!((m.grad_p(&x, &p).unwrap() - vector(&[0.5, 0.0])).norm() < 1e-15);
        assert_eq!(m.grad_x(&x, &vector(&[0.3, -0.7])).unwrap(), vector(&[0.0, 0.0]));
    }

    #[test]
    fn guards() {
        let m = eikonal();
        let x = vector(&[0.0, 0.0]);
        assert!(matches!(m.grad_p(&x, &vector(&[1e-14, 0.0])), Err(Error::SingularCostate { .. })));
        assert!(matches!(m.eval(&vector(&[f64::NAN, 0.0]), &vector(&[1.0, 0.0])), Err(Error::InvalidInput(_))));

        let single = ControlAffineSystem::new(
            Arc::new(ConstantField::zero(2)),
            vec![Arc::new(ConstantField::unit(2, 0))],
            2.0,
        )
        .unwrap();
        let m1 = HamiltonianModel::new(single);
        assert!(matches!(m1.grad_p(&x, &vector(&[0.0, 1.0])), Err(Error::KernelCostate { .. })));
    }

    #[test]
    fn state_dependent_column_gradient() {
        // F(x) = diag(1 + x1^2, 1): with p = (0, 1) the norm |F^T p| = 1 does not move with x1.
        let f1 = FnField::new(2, |x: &Vector| vector(&[1.0 + x[0] * x[0], 0.0]));
        let sys = ControlAffineSystem::new(
            Arc::new(ConstantField::zero(2)),
            vec![Arc::new(f1), Arc::new(ConstantField::unit(2, 1))],
            10.0,
        )
        .unwrap();
        let m = HamiltonianModel::new(sys);
        let g = m.grad_x(&vector(&[1.0, 0.0]), &vector(&[0.0, 1.0])).unwrap();
        assert!(g.norm() < 1e-9, "{g}");
    }

    #[test]
    fn h2_cases() {
        let tol = 1e-8;
        let p = vector(&[0.3, -1.1]);
        let x = vector(&[0.2, 0.5]);
        assert!(eikonal().check_h2(&x, &p, tol).unwrap());
        assert!(zermelo(0.5).check_h2(&x, &p, tol).unwrap());

        let single = ControlAffineSystem::new(
            Arc::new(ConstantField::zero(2)),
            vec![Arc::new(ConstantField::new(vector(&[1.0, 0.5])))],
            2.0,
        )
        .unwrap();
        assert!(!HamiltonianModel::new(single).check_h2(&x, &p, tol).unwrap());

        let wide = ControlAffineSystem::new(
            Arc::new(ConstantField::zero(2)),
            vec![
                Arc::new(ConstantField::unit(2, 0)),
                Arc::new(ConstantField::unit(2, 1)),
                Arc::new(ConstantField::new(vector(&[1.0, 1.0]))),
            ],
            4.0,
        )
        .unwrap();
        assert!(HamiltonianModel::new(wide).check_h2(&x, &p, tol).unwrap());
    }

    #[test]
    fn growth_check_flags_violations() {
        let sys = curved();
        assert!(sys.system().check_growth(&vector(&[0.5, 0.5])).is_ok());
        let tight =
            ControlAffineSystem::new(Arc::new(ConstantField::new(vector(&[3.0, 0.0]))), identity_columns(2), 1.0)
                .unwrap();
        assert!(matches!(tight.check_growth(&vector(&[0.0, 0.0])), Err(Error::GrowthViolation { .. })));
    }

    #[test]
    fn semiconvexity_constant_of_flat_model_is_zero() {
        let m = eikonal();
        let samples = vec![(vector(&[1.0, 2.0]), vector(&[0.5, 0.1]))];
        assert_eq!(m.semiconvexity_constant(&samples).unwrap(), 0.0);
        assert!(curved().semiconvexity_constant(&samples).unwrap() >= 0.0);
    }

    fn admissible() -> impl Strategy<Value = (Vector, Vector)> {
        (
            prop::array::uniform2(-1.5f64..1.5),
            (0.2f64..3.0, 0.0f64..std::f64::consts::TAU),
        )
            .prop_map(|(x, (r, a))| (vector(&x), vector(&[r * a.cos(), r * a.sin()])))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn homogeneity((x, p) in admissible(), lambda in 1e-3f64..10.0) {
            for m in [eikonal(), zermelo(0.5), curved()] {
                let h = m.eval(&x, &p).unwrap();
                let hl = m.eval(&x, &(&p * lambda)).unwrap();
                prop_assert!((hl - lambda * h).abs() <= 1e-12 * (1.0 + (lambda * h).abs()));
            }
        }

        #[test]
        fn euler_relation((x, p) in admissible()) {
            let m = curved();
            let d = m.derivatives(&x, &p, true).unwrap();
            prop_assert!((d.grad_p.dot(&p) - d.value).abs() <= 1e-10);
            let hess = d.hess.unwrap();
            prop_assert!((&hess.pp * &p).norm() <= 1e-12 * (1.0 + hess.pp.norm()));
            prop_assert!(crate::linalg::sym_eigenvalues(&hess.pp)[0] >= -1e-12);
        }

        #[test]
        fn gradients_match_finite_differences((x, p) in admissible()) {
            let m = curved();
            let step = 1e-5;
            let gp = fd_grad(|q| m.eval(&x, q).unwrap(), &p, step);
            let gx = fd_grad(|y| m.eval(y, &p).unwrap(), &x, step);
            prop_assert!((gp - m.grad_p(&x, &p).unwrap()).amax() <= 1e-6);
            prop_assert!((gx - m.grad_x(&x, &p).unwrap()).amax() <= 1e-6);
        }

        #[test]
        fn hessians_match_finite_differences((x, p) in admissible()) {
            let m = curved();
            let step = 1e-5;
            let b = m.hess(&x, &p).unwrap();
            let xx = fd_jac(|y| m.grad_x(y, &p).unwrap(), &x, step);
            let xp = fd_jac(|y| m.grad_p(y, &p).unwrap(), &x, step);
            let px = fd_jac(|q| m.grad_x(&x, q).unwrap(), &p, step);
            let pp = fd_jac(|q| m.grad_p(&x, q).unwrap(), &p, step);
            prop_assert!((xx - &b.xx).amax() <= 1e-5, "xx");
            prop_assert!((xp - &b.xp).amax() <= 1e-5, "xp");
            prop_assert!((px - &b.px).amax() <= 1e-5, "px");
            prop_assert!((pp - &b.pp).amax() <= 1e-5, "pp");
            prop_assert_eq!(b.px.clone(), b.xp.transpose());
        }

        #[test]
        fn convex_along_segments((x, p) in admissible(), (_, q) in admissible(), s in 0.0f64..1.0) {
            let m = curved();
            let mid = &p * s + &q * (1.0 - s);
            let lhs = m.eval(&x, &mid).unwrap();
            let rhs = s * m.eval(&x, &p).unwrap() + (1.0 - s) * m.eval(&x, &q).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }
}
