// mdbook cannot run listings that depend on workspace crates, so each
// chapter is pulled in as the docs of an empty module and `cargo test`
// runs its code blocks as doc tests. One module per chapter keeps a
// failure traceable to its source file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("../../../book/src/correlation.md")]
pub mod correlation {}
#[doc = include_str!("../../../book/src/strips.md")]
pub mod strips {}
#[doc = include_str!("../../../book/src/initialization.md")]
pub mod initialization {}
#[doc = include_str!("../../../book/src/refinement.md")]
pub mod refinement {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
