//! Doc-test shims for the mdbook guide: every fenced Rust block in the book
//! chapters compiles and runs under `cargo test`, so the narrative cannot
//! drift from the library.

#[doc = include_str!("../../../book/src/patterns.md")]
mod patterns {}

#[doc = include_str!("../../../book/src/psf.md")]
mod psf {}

#[doc = include_str!("../../../book/src/pyramid.md")]
mod pyramid {}

#[doc = include_str!("../../../book/src/spectral.md")]
mod spectral {}

#[doc = include_str!("../../../book/src/vq.md")]
mod vq {}

#[doc = include_str!("../../../book/src/attention.md")]
mod attention {}

#[doc = include_str!("../../../book/src/distillation.md")]
mod distillation {}
