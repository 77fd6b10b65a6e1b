//! Minimum time functions of control-affine differential inclusions, computed
//! along backward Hamiltonian characteristics and checked against a
//! brute-force grid solver.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod charflow;
pub mod conjugate;
pub mod error;
pub mod field;
pub mod hamiltonian;
pub mod linalg;
pub mod oracle;
pub mod scenario;
pub mod target;
pub mod verify;

pub use error::{Error, Result};
pub use hamiltonian::{ControlAffineSystem, HamiltonianModel, HessianBlocks, SystemSpec, VectorField};
pub use target::{BoundaryChart, BoundarySample, PetrovReport, SignedDistance, TargetGeometry, TargetSpec};
pub use charflow::{CharacteristicRecord, Characteristics, FlowOptions, Level};
pub use conjugate::{ConjugateDetector, ConjugateOptions, ConjugateReport, Criterion};
pub use field::{FieldOptions, FieldValue, MinTimeField};
pub use oracle::{GridOptions, HjbGrid, ScalarField};
pub use verify::{
    c2_certificate, differentiability_propagation, subgradient_propagation, verify_scenario, verify_with_grid, CertificateStatus, Oracle,
    VerifyOptions, VerifyRun,
};
pub use scenario::{RunOptions, ScenarioConfig};
