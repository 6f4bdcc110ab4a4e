//! Runs the guide's code listings as doc-tests. One module per chapter so a
//! failure points at its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/quantiles.md")]
pub mod quantiles {}
#[doc = include_str!("../../../book/src/panels.md")]
pub mod panels {}
#[doc = include_str!("../../../book/src/cic.md")]
pub mod cic {}
#[doc = include_str!("../../../book/src/diagnostics.md")]
pub mod diagnostics {}
#[doc = include_str!("../../../book/src/dsc.md")]
pub mod dsc {}
#[doc = include_str!("../../../book/src/simplex.md")]
pub mod simplex {}
#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../README.md")]
pub mod readme {}
