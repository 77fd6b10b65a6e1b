//! State-dependent vector fields used as drift and control columns.
//!
//! Every field exposes its value, Jacobian and per-component Hessians. Built-in
//! fields supply closed-form derivatives; [`FnField`] falls back on central
//! differences with step `1e-5 * (1 + |x|)`.

use std::fmt;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

const FD_STEP: f64 = 1e-5;

pub trait VectorField: Send + Sync + fmt::Debug {
    /// Dimension of the state space (input and output).
    fn dim(&self) -> usize;

    fn value(&self, x: &Vector) -> Vector;

    /// `J[i][j] = d f_i / d x_j`.
    fn jacobian(&self, x: &Vector) -> Matrix {
        fd_jacobian(|y| self.value(y), x)
    }

    /// One `n x n` Hessian per output component.
    fn hessians(&self, x: &Vector) -> Vec<Matrix> {
        fd_hessians(|y| self.jacobian(y), x, self.dim())
    }

    /// True when the field does not depend on the state.
    fn is_constant(&self) -> bool {
        false
    }

    /// True when all second derivatives vanish identically.
    fn is_affine(&self) -> bool {
        self.is_constant()
    }
}

fn fd_step(x: &Vector) -> f64 {
    FD_STEP * (1.0 + x.norm())
}

pub(crate) fn fd_jacobian(f: impl Fn(&Vector) -> Vector, x: &Vector) -> Matrix {
    let n = x.len();
    let h = fd_step(x);
    let rows = f(x).len();
    let mut jac = Matrix::zeros(rows, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

fn fd_hessians(jac: impl Fn(&Vector) -> Matrix, x: &Vector, outputs: usize) -> Vec<Matrix> {
    let n = x.len();
    let h = fd_step(x);
    let mut hess = vec![Matrix::zeros(n, n); outputs];
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let d = (jac(&xp) - jac(&xm)) / (2.0 * h);
        for (i, hi) in hess.iter_mut().enumerate() {
            for k in 0..n {
                hi[(k, j)] = d[(i, k)];
            }
        }
    }
    for hi in &mut hess {
        *hi = (&*hi + hi.transpose()) * 0.5;
    }
    hess
}

/// `f(x) = value`.
#[derive(Debug, Clone)]
pub struct ConstantField {
    value: Vector,
}

impl ConstantField {
    pub fn new(value: Vector) -> Self {
        Self { value }
    }

    pub fn zero(n: usize) -> Self {
        Self { value: Vector::zeros(n) }
    }

    /// The `i`-th standard basis vector of `R^n`.
    pub fn unit(n: usize, i: usize) -> Self {
        let mut value = Vector::zeros(n);
        value[i] = 1.0;
        Self { value }
    }
}

impl VectorField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }
    fn value(&self, _x: &Vector) -> Vector {
        self.value.clone()
    }
    fn jacobian(&self, _x: &Vector) -> Matrix {
        let n = self.dim();
        Matrix::zeros(n, n)
    }
    fn hessians(&self, _x: &Vector) -> Vec<Matrix> {
        let n = self.dim();
        vec![Matrix::zeros(n, n); n]
    }
    fn is_constant(&self) -> bool {
        true
    }
}

/// `f(x) = A x + b`.
#[derive(Debug, Clone)]
pub struct LinearField {
    matrix: Matrix,
    offset: Vector,
}

impl LinearField {
    pub fn new(matrix: Matrix, offset: Vector) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() != offset.len() {
            return Err(Error::Load(format!(
                "linear field needs an n x n matrix and length-n offset, got {}x{} and {}",
                matrix.nrows(),
                matrix.ncols(),
                offset.len()
            )));
        }
        Ok(Self { matrix, offset })
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.offset.len()
    }
    fn value(&self, x: &Vector) -> Vector {
        &self.matrix * x + &self.offset
    }
    fn jacobian(&self, _x: &Vector) -> Matrix {
        self.matrix.clone()
    }
    fn hessians(&self, _x: &Vector) -> Vec<Matrix> {
        let n = self.dim();
        vec![Matrix::zeros(n, n); n]
    }
    fn is_affine(&self) -> bool {
        true
    }
}

/// A term `coef * prod_j x_j^powers[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coef: f64,
    pub powers: Vec<u32>,
}

impl Monomial {
    fn eval(&self, x: &Vector) -> f64 {
        self.powers
            .iter()
            .zip(x.iter())
            .fold(self.coef, |acc, (&k, &xi)| acc * xi.powi(k as i32))
    }

    fn derivative_factor(power: u32, order: u32, xi: f64) -> f64 {
        if order > power {
            return 0.0;
        }
        let falling: f64 = (0..order).map(|k| (power - k) as f64).product();
        falling * xi.powi((power - order) as i32)
    }

    /// Mixed partial of order `orders[j]` in each coordinate.
    fn partial(&self, x: &Vector, orders: &[u32]) -> f64 {
        let mut acc = self.coef;
        for (j, (&power, &xi)) in self.powers.iter().zip(x.iter()).enumerate() {
            acc *= Self::derivative_factor(power, orders[j], xi);
            if acc == 0.0 {
                return 0.0;
            }
        }
        acc
    }
}

/// Each output component is a sum of monomials.
#[derive(Debug, Clone)]
pub struct PolynomialField {
    n: usize,
    components: Vec<Vec<Monomial>>,
}

impl PolynomialField {
    pub fn new(n: usize, components: Vec<Vec<Monomial>>) -> Result<Self> {
        if components.len() != n {
            return Err(Error::Load(format!(
                "polynomial field needs {n} components, got {}",
                components.len()
            )));
        }
        for (i, terms) in components.iter().enumerate() {
            for m in terms {
                if m.powers.len() != n {
                    return Err(Error::Load(format!(
                        "polynomial component {i}: monomial has {} exponents, expected {n}",
                        m.powers.len()
                    )));
                }
            }
        }
        Ok(Self { n, components })
    }
}

impl VectorField for PolynomialField {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            self.n,
            self.components.iter().map(|terms| terms.iter().map(|m| m.eval(x)).sum()),
        )
    }
    fn jacobian(&self, x: &Vector) -> Matrix {
        let mut jac = Matrix::zeros(self.n, self.n);
        let mut orders = vec![0u32; self.n];
        for (i, terms) in self.components.iter().enumerate() {
            for j in 0..self.n {
                orders[j] = 1;
                jac[(i, j)] = terms.iter().map(|m| m.partial(x, &orders)).sum();
                orders[j] = 0;
            }
        }
        jac
    }
    fn hessians(&self, x: &Vector) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(self.n);
        let mut orders = vec![0u32; self.n];
        for terms in &self.components {
            let mut h = Matrix::zeros(self.n, self.n);
            for j in 0..self.n {
                for k in j..self.n {
                    orders[j] += 1;
                    orders[k] += 1;
                    let v: f64 = terms.iter().map(|m| m.partial(x, &orders)).sum();
                    orders[j] -= 1;
                    orders[k] -= 1;
                    h[(j, k)] = v;
                    h[(k, j)] = v;
                }
            }
            out.push(h);
        }
        out
    }
}

type FieldFn = dyn Fn(&Vector) -> Vector + Send + Sync;

/// User-supplied field without analytic derivatives.
pub struct FnField {
    n: usize,
    f: Box<FieldFn>,
}

impl FnField {
    pub fn new(n: usize, f: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        Self { n, f: Box::new(f) }
    }
}

impl fmt::Debug for FnField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnField").field("n", &self.n).finish_non_exhaustive()
    }
}

impl VectorField for FnField {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, x: &Vector) -> Vector {
        (self.f)(x)
    }
}

/// Text form of a field entry. In `fields`, `identity` expands to the `n`
/// standard basis columns (`F = I`); as a drift it is the map `x -> x`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    Identity,
    Constant { value: Vec<f64> },
    Linear { matrix: Vec<Vec<f64>>, offset: Option<Vec<f64>> },
    /// `components[i]` lists monomials `[coef, e_1, ..., e_n]`.
    Polynomial { components: Vec<Vec<Vec<f64>>> },
}

impl FieldSpec {
    fn check_len(what: &str, got: usize, n: usize) -> Result<()> {
        if got != n {
            return Err(Error::Load(format!("{what}: expected {n} entries, got {got}")));
        }
        Ok(())
    }

    fn linear(n: usize, matrix: &[Vec<f64>], offset: Option<&Vec<f64>>) -> Result<LinearField> {
        Self::check_len("linear.matrix rows", matrix.len(), n)?;
        let mut a = Matrix::zeros(n, n);
        for (i, row) in matrix.iter().enumerate() {
            Self::check_len("linear.matrix row", row.len(), n)?;
            for (j, v) in row.iter().enumerate() {
                a[(i, j)] = *v;
            }
        }
        let b = match offset {
            Some(o) => {
                Self::check_len("linear.offset", o.len(), n)?;
                Vector::from_column_slice(o)
            }
            None => Vector::zeros(n),
        };
        LinearField::new(a, b)
    }

    fn polynomial(n: usize, components: &[Vec<Vec<f64>>]) -> Result<PolynomialField> {
        let mut comps = Vec::with_capacity(components.len());
        for terms in components {
            let mut monos = Vec::with_capacity(terms.len());
            for row in terms {
                Self::check_len("polynomial monomial [coef, exponents...]", row.len(), n + 1)?;
                let powers = row[1..]
                    .iter()
                    .map(|e| {
                        if *e < 0.0 || e.fract() != 0.0 {
                            Err(Error::Load(format!("polynomial exponent {e} is not a nonnegative integer")))
                        } else {
                            Ok(*e as u32)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                monos.push(Monomial { coef: row[0], powers });
            }
            comps.push(monos);
        }
        PolynomialField::new(n, comps)
    }

    /// Build the drift `h`.
    pub fn build_drift(&self, n: usize) -> Result<Box<dyn VectorField>> {
        Ok(match self {
            FieldSpec::Zero => Box::new(ConstantField::zero(n)),
            FieldSpec::Identity => Box::new(LinearField::new(Matrix::identity(n, n), Vector::zeros(n))?),
            FieldSpec::Constant { value } => {
                Self::check_len("constant.value", value.len(), n)?;
                Box::new(ConstantField::new(Vector::from_column_slice(value)))
            }
            FieldSpec::Linear { matrix, offset } => Box::new(Self::linear(n, matrix, offset.as_ref())?),
            FieldSpec::Polynomial { components } => Box::new(Self::polynomial(n, components)?),
        })
    }

    /// Build one or more control columns.
    pub fn build_columns(&self, n: usize) -> Result<Vec<Box<dyn VectorField>>> {
        Ok(match self {
            FieldSpec::Identity => (0..n)
                .map(|i| Box::new(ConstantField::unit(n, i)) as Box<dyn VectorField>)
                .collect(),
            FieldSpec::Zero => {
                return Err(Error::Load("a zero control column is not allowed".into()));
            }
            other => vec![other.build_drift(n)?],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let err = (a - b).abs().max();
        assert!(err <= tol, "max deviation {err:.3e} > {tol:.1e}\n{a}\n{b}");
    }

    fn sample_polynomial() -> PolynomialField {
        // f = (1 + x1^2 x2, 3 x2^3 - x1)
        PolynomialField::new(
            2,
            vec![
                vec![Monomial { coef: 1.0, powers: vec![0, 0] }, Monomial { coef: 1.0, powers: vec![2, 1] }],
                vec![Monomial { coef: 3.0, powers: vec![0, 3] }, Monomial { coef: -1.0, powers: vec![1, 0] }],
            ],
        )
        .unwrap()
    }

    #[test]
    fn polynomial_value_and_derivatives_match_closed_form() {
        let f = sample_polynomial();
        let x = dvector![0.7, -1.3];
        let v = f.value(&x);
        assert!((v[0] - (1.0 + 0.49 * -1.3)).abs() < 1e-14);
        assert!((v[1] - (3.0 * (-1.3f64).powi(3) - 0.7)).abs() < 1e-14);

        let jac = f.jacobian(&x);
        let expected = nalgebra::dmatrix![2.0 * 0.7 * -1.3, 0.49; -1.0, 9.0 * 1.69];
        assert_close(&jac, &expected, 1e-13);

        let hess = f.hessians(&x);
        assert_close(&hess[0], &nalgebra::dmatrix![2.0 * -1.3, 2.0 * 0.7; 2.0 * 0.7, 0.0], 1e-13);
        assert_close(&hess[1], &nalgebra::dmatrix![0.0, 0.0; 0.0, 18.0 * -1.3], 1e-13);
    }

    #[test]
    fn finite_difference_fallback_tracks_analytic_derivatives() {
        let poly = sample_polynomial();
        let x = dvector![0.4, 0.9];
        let fd = fd_jacobian(|y| poly.value(y), &x);
        assert_close(&fd, &poly.jacobian(&x), 1e-8);

        let user = FnField::new(2, |y: &Vector| dvector![1.0 + y[0] * y[0] * y[1], 3.0 * y[1].powi(3) - y[0]]);
        let h_user = user.hessians(&x);
        let h_poly = poly.hessians(&x);
        for (a, b) in h_user.iter().zip(&h_poly) {
            assert_close(a, b, 1e-5);
        }
    }

    #[test]
    fn config_parsing_rejects_unknown_keys_and_bad_shapes() {
        let ok: FieldSpec = toml::from_str("kind = \"constant\"\nvalue = [0.5, 0.0]").unwrap();
        assert_eq!(ok, FieldSpec::Constant { value: vec![0.5, 0.0] });
        assert!(toml::from_str::<FieldSpec>("kind = \"constant\"\nvalue = [1.0]\nextra = 3").is_err());
        assert!(toml::from_str::<FieldSpec>("kind = \"spline\"").is_err());
        assert!(ok.build_drift(3).is_err());

        let poly = FieldSpec::Polynomial { components: vec![vec![vec![1.0, 0.5, 0.0]], vec![]] };
        assert!(poly.build_drift(2).is_err(), "fractional exponents must be rejected");
    }

    #[test]
    fn identity_columns_expand_to_basis() {
        let cols = FieldSpec::Identity.build_columns(3).unwrap();
        assert_eq!(cols.len(), 3);
        let x = dvector![1.0, 2.0, 3.0];
        for (i, c) in cols.iter().enumerate() {
            let v = c.value(&x);
            assert_eq!(v[i], 1.0);
            assert_eq!(v.sum(), 1.0);
            assert!(c.is_constant());
        }
    }
}
