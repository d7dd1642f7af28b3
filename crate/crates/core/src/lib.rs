#![cfg_attr(not(feature = "std"), no_std)]
//! Single-generator framework in which per-layer AdaIN codes switch one
//! network between supervised segmentation, bidirectional domain adaptation
//! and self-consistency distillation.

extern crate alloc;

pub mod autograd;
pub mod codespace;
pub mod data;
pub mod error;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
