//! Compiles the book's code listings as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/polynomials.md")]
pub mod polynomials {}
#[doc = include_str!("../../../book/src/ph_splines.md")]
pub mod ph_splines {}
#[doc = include_str!("../../../book/src/corridors.md")]
pub mod corridors {}
#[doc = include_str!("../../../book/src/stage1.md")]
pub mod stage1 {}
#[doc = include_str!("../../../book/src/spatial.md")]
pub mod spatial {}
#[doc = include_str!("../../../book/src/stage2.md")]
pub mod stage2 {}
#[doc = include_str!("../../../book/src/solver.md")]
pub mod solver {}
#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
