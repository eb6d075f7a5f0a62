//! UV-space adversarial patches against face embedders.
//!
//! The crate is a self-contained desk-scale pipeline:
//!
//! - [`diffcore`] — reverse-mode autodiff over dense f32 tensors, Adam, and
//!   a cosine-annealing schedule. Everything differentiable runs through it.
//! - [`radiance`] — a toy tri-plane radiance generator: latent -> feature
//!   planes -> volume rendering -> super-resolved face image at any camera
//!   pose.
//! - [`inversion`] — two-stage latent recovery against a target image
//!   (optimize the latent and per-layer noise, then fine-tune the generator
//!   around the pivot).
//! - [`faceid`] — a zoo of small face-embedding networks, alignment, and
//!   synthetic identity sets for calibration and evaluation.
//! - [`uvgeom`] — the face-patch mesh, UV rasterization with z-buffering,
//!   binary patch-region masks, differentiable patch application, random
//!   similarity transforms, and Beta pose sampling.
//! - [`attack`] — the UV-map generator, cosine-similarity and Gram-style
//!   losses, the patch training loop, and the FGSM/MIM/DIM/PGD baselines.
//! - [`eval`] — FAR-calibrated thresholds, attack success rate, mean
//!   confidence scores against a pluggable verification client, and the
//!   transfer matrix report.
//! - [`runner`] — the experiment commands behind the `uvpatch` binary.
//!
//! See the crate `examples/` directory for one runnable example per
//! capability; `tests/acceptance.rs` is the verification suite.

pub mod attack;
pub mod blob;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod faceid;
pub mod inversion;
pub mod pngio;
pub mod radiance;
pub mod rng;
pub mod runner;
pub mod uvgeom;

pub use error::{Error, Result};
