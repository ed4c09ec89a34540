//! Relation-based knowledge distillation for semantic segmentation.
//!
//! The crate trains lightweight student segmentation networks against a
//! larger frozen teacher by combining three relation losses on top of the
//! usual supervised segmentation objective:
//!
//! - an affinity loss over neighboring pixel pairs, labeled by the teacher's
//!   predicted label map ([`affinity`]),
//! - a gram-matrix kernel loss over projected intermediate features
//!   ([`kernel`]),
//! - a per-pixel KL divergence between student and teacher output
//!   distributions ([`logits`]).
//!
//! [`composer`] holds the segmentation losses (dice, focal), the dice
//! evaluation metric and the weighted total objective. [`data`] generates a
//! synthetic multi-site benchmark simulating acquisition shift, [`models`]
//! registers toy encoder-decoder networks with feature taps, and [`train`]
//! wires everything into teacher pretraining, student distillation and an
//! ablation grid.

pub mod affinity;
pub mod autograd;
pub mod checkpoint;
pub mod composer;
pub mod config;
pub mod data;
pub mod error;
pub mod kernel;
pub mod logits;
pub mod math;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
