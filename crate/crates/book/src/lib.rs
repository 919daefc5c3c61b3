//! The guide's chapters, so `cargo test` runs their code listings.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tape.md")]
pub mod tape {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/teacher.md")]
pub mod teacher {}
#[doc = include_str!("../../../book/src/student.md")]
pub mod student {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/testing.md")]
pub mod testing {}
