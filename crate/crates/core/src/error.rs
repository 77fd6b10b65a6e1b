use thiserror::Error;

/// Errors raised by the characteristic, oracle and verification machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular costate: |p| = {norm:.3e} is below the guard {guard:.1e}")]
    SingularCostate { norm: f64, guard: f64 },

    #[error("costate lies in the kernel of F(x)^T: |F(x)^T p| = {norm:.3e} (guard {guard:.1e})")]
    KernelCostate { norm: f64, guard: f64 },

    #[error("growth bound violated at {point:?}: |h| + sum |f_i| = {value:.6e} > rho (1 + |x|) = {bound:.6e}")]
    GrowthViolation { point: Vec<f64>, value: f64, bound: f64 },

    #[error("Petrov condition fails at {point:?}: H(xi, grad b) = {value:.6e} <= {threshold:.1e}")]
    PetrovFailure { point: Vec<f64>, value: f64, threshold: f64 },

    #[error("integration failure at node {node} (t = {t:.6}): {reason}")]
    IntegrationFailure { node: usize, t: f64, reason: String },

    #[error("hypothesis (H2) violated at node {node} (t = {t:.6}); rank criterion inapplicable")]
    H2Violation { node: usize, t: f64 },

    #[error("empty field: no boundary sample passes the Petrov test")]
    EmptyField,

    #[error("point {point:?} is outside the characteristic tube")]
    OutOfTube { point: Vec<f64> },

    #[error("Newton solve did not converge in {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("value iteration did not converge after {sweeps} sweeps (residual {residual:.3e})")]
    NotConverged { sweeps: usize, residual: f64 },

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}
