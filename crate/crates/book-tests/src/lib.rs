//! Book snippets as doctests. Each chapter gets its own module so a failing
//! snippet points at its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/retrieval.md")]
pub mod retrieval {}
#[doc = include_str!("../../../book/src/phrasal.md")]
pub mod phrasal {}
#[doc = include_str!("../../../book/src/inference.md")]
pub mod inference {}
#[doc = include_str!("../../../book/src/heads.md")]
pub mod heads {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
