//! Runs the guide's code blocks as doc-tests. One module per chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/fhe.md")]
pub mod fhe {}
#[doc = include_str!("../../../book/src/attestation.md")]
pub mod attestation {}
#[doc = include_str!("../../../book/src/vfhe.md")]
pub mod vfhe {}
#[doc = include_str!("../../../book/src/pir.md")]
pub mod pir {}
#[doc = include_str!("../../../book/src/psi.md")]
pub mod psi {}
#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
