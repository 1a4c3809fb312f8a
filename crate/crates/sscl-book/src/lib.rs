//! The guide in `book/` has runnable snippets, but mdbook cannot link them
//! against this workspace. Each chapter is pulled in as the docs of an empty
//! module instead, so `cargo test --doc -p sscl-book` compiles and runs
//! every snippet against the current crate.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/representation.md")]
pub mod representation {}
#[doc = include_str!("../../../book/src/detector.md")]
pub mod detector {}
#[doc = include_str!("../../../book/src/projection.md")]
pub mod projection {}
#[doc = include_str!("../../../book/src/buffer.md")]
pub mod buffer {}
#[doc = include_str!("../../../book/src/active.md")]
pub mod active {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
