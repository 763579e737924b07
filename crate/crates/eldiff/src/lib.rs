//! Mask-conditioned denoising-diffusion engine for grayscale
//! electroluminescence imagery.
//!
//! The crate covers the full desk-scale pipeline: a small reverse-mode
//! tensor engine, the cosine noise schedule and forward process, a
//! conditional U-Net noise predictor, the training loop (Adam, gradient
//! accumulation, EMA, early stopping, checkpoints, per-category
//! fine-tuning), the conditioning-mask construction and leakage-safe split
//! tooling, and generative-quality metrics (FID, KID, AUROC, AP).
//!
//! See the book under `book/` for a guided tour; its code snippets run as
//! doc-tests of this crate.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
