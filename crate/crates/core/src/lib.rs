//! Organ-, text- and point-prompted volumetric tumor segmentation.
//!
//! A plain 3D ViT encoder with frozen attention blocks is tuned through
//! spatial adapters and per-stage alignment adapters. Adapter outputs are
//! pulled towards foreground/background text embeddings by a per-stage
//! focal + dice objective, and a point-prompted decoder fuses the stage
//! outputs with the input volume to produce the final mask.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod decoder;
pub mod model;
pub mod edt;
pub mod encoder;
pub mod head;
pub mod objectives;
pub mod autograd;
pub mod error;
pub mod io;
pub mod metrics;
pub mod patch;
pub mod pipeline;
pub mod phantom;
pub mod prompt_bank;
pub mod volume;

pub use error::{Result, TagsError};
