// mdbook cannot run snippets that depend on workspace crates, so each chapter
// is pulled in as a doc comment and `cargo test --doc` runs its listings.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/factors.md")]
pub mod factors {}
#[doc = include_str!("../../book/src/chains.md")]
pub mod chains {}
#[doc = include_str!("../../book/src/generator.md")]
pub mod generator {}
#[doc = include_str!("../../book/src/convolution.md")]
pub mod convolution {}
#[doc = include_str!("../../book/src/fitting.md")]
pub mod fitting {}
#[doc = include_str!("../../book/src/cli.md")]
pub mod cli {}
