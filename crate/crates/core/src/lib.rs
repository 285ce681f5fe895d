//! Low-rank adapter placement experiments on a toy five-module speech
//! synthesizer.
//!
//! * [`numkern`]: tensors, layers with manual backward passes, gradient oracle
//! * [`lora`]: attach / merge / unmerge / detach of low-rank adapters
//! * [`model`]: the synthesizer and its layer paths
//! * [`schemes`]: the eight adapter placements
//! * [`emodata`]: synthetic emotional corpus and the classification oracle
//! * [`trainer`]: pretraining, adapter and full fine-tuning, sweeps
//! * [`adapterio`]: the `EELA` container and the hot-swap registry
//! * [`config`]: `key = value` experiment configuration

pub mod adapterio;
pub mod config;
pub mod emodata;
pub mod error;
pub mod lora;
pub mod model;
pub mod numkern;
pub mod schemes;
pub mod trainer;

pub use error::{Error, Result};
