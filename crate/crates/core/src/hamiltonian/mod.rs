//! Control-affine Hamiltonian, its derivatives and hypothesis checks.

pub mod fields;
mod model;
mod spec;

pub use fields::{ConstantField, FieldSpec, FnField, LinearField, Monomial, PolynomialField, VectorField};
pub use model::{ControlAffineSystem, Derivatives, HamiltonianModel, HessianBlocks, DEFAULT_ZERO_P_GUARD};
pub use spec::SystemSpec;
