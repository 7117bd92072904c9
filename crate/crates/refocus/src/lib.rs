//! Alias-free multi-scale machinery for focus-based image modeling.
//!
//! Uniform downsampling folds supra-Nyquist content into the baseband and
//! leaves jaggies and moire in every coarse view. This crate builds the
//! alternative pipeline end to end, at desk scale and with every identity
//! executable:
//!
//! * [`image`] — grayscale images, PGM/PNG I/O, and synthetic patterns
//!   designed to provoke aliasing.
//! * [`psf`] — defocus disk and Gaussian kernels, and the cosine
//!   focus-radius schedule from full blur to sharp.
//! * [`pyramid`] — the dual-path pyramid: focused views `L_k`, naive
//!   decimated views `D_k`, and alias residuals `A_k = D_k - L_k`.
//! * [`spectral`] — DFT machinery and the folding identities that make
//!   "aliasing" a measurable quantity rather than a vibe.
//! * [`vq`] — dual-path vector quantization with a large structure codebook
//!   and a small alias codebook.
//! * [`attn`] — the teacher's alias-gate cross-attention block with
//!   analytic gradients, plus the student path that omits it.
//! * [`distill`] — the teacher-to-student objective and a toy end-to-end
//!   training loop with zero-overhead deployment.
//!
//! The guide in `book/` walks through the same pipeline chapter by chapter;
//! its code snippets compile and run as doc-tests of this crate.

pub mod attn;
pub mod distill;
pub mod error;
pub mod image;
pub mod mat;
pub mod psf;
pub mod pyramid;
pub mod rng;
pub mod spectral;
pub mod vq;

mod book;

pub use error::{Error, Result};
