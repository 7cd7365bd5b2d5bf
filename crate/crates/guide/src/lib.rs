//! The mdbook guide under `book/src`, included here so that every code block
//! in it is compiled and run by `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/linear.md")]
pub mod linear {}

#[doc = include_str!("../../../book/src/digester.md")]
pub mod digester {}

#[doc = include_str!("../../../book/src/tuning.md")]
pub mod tuning {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
