//! Brute-force grid oracle and numerical nonsmooth-analysis predicates.

pub mod hjb;
pub mod nonsmooth;

pub use hjb::{control_directions, scaled_control_count, GridOptions, HjbGrid, SweepStats};
pub use nonsmooth::{
    frechet_subdifferential_test, frechet_superdifferential_test, proximal_subgradient_test, semiconcavity_check,
    FnScalar, FrechetOptions, FrechetResult, Negated, ProbeSet, ProximalResult, Region, ScalarField,
    SemiconcavityOptions, SemiconcavityResult, Slack,
};
