//! mdbook cannot run book code blocks against crate dependencies, so
//! each guide chapter is included here as a doc comment and `cargo test
//! --doc` exercises every snippet. A failing chapter points at the
//! module named after it.

#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/kalman.md")]
pub mod kalman {}

#[doc = include_str!("../../../book/src/enkf.md")]
pub mod enkf {}

#[doc = include_str!("../../../book/src/multilevel.md")]
pub mod multilevel {}

#[doc = include_str!("../../../book/src/benchmarks.md")]
pub mod benchmarks {}

#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}
