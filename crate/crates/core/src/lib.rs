//! Self-supervised adaptation of an RGB-trained one-stage detector to a
//! co-registered thermal modality, with inference-time fusion of background
//! feature-pyramid regions.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autograd`]: a small CPU tensor type and a tape-based
//!   reverse-mode engine, plus [`nn`] layers and the [`optim`] Adam optimizer.
//! - [`mask_gen`]: intensity markers, Sobel elevation, priority-flood
//!   watershed, morphological refinement and per-level resizing.
//! - [`detector`]: the two-branch detector (thermal pre-layer, residual
//!   backbone, feature pyramid, shared heads, anchors and NMS).
//! - [`adversarial`]: gradient reversal, domain discriminators and the focal
//!   domain loss.
//! - [`alignment`]: foreground-masked pyramid alignment.
//! - [`fusion`]: weighted background fusion of the two pyramids.
//! - [`trainer`]: source pretraining, the adaptation loop, schedules and
//!   checkpoints.
//! - [`evaluation`]: IoU matching, AP50, AR100 and the shadowed-crown rate.
//! - [`synthdata`]: registered synthetic scenes with ground truth.
//! - [`features`]: pooled pyramid feature export and a linear probe.
//! - [`cli`]: the `shadowsense` command line.

pub mod adversarial;
pub mod alignment;
pub mod autograd;
pub mod boxes;
pub mod cli;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod fusion;
pub mod image;
pub mod io;
pub mod mask_gen;
pub mod nn;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Image, ImagePair};
pub use tensor::Tensor;
