//! Criterion benchmarks for the characteristic integrator, conjugate detectors, field and grid oracle.
//!
//! Run with `cargo bench -p mintime-bench`.
