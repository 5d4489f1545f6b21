//! Continual stereo matching via reusable architecture growth.
//!
//! The crate builds small volumetric stereo networks whose repeating unit is
//! a searched cell. Learning a sequence of heterogeneous scenes proceeds by
//! searching task-specific cells, growing the network by choosing per layer
//! between frozen cells from earlier tasks and the newly searched cell,
//! training with history frozen, and routing inference through per-task
//! autoencoders. A synthetic scene generator, continual metrics (EPE, D1,
//! FAE, BWT, ARR), an incremental-finetuning baseline, and checkpointing make
//! the whole pipeline runnable on a CPU in minutes.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod continual;
pub mod error;
pub mod growth;
pub mod io;
pub mod metrics;
pub mod net;
pub mod proxy;
pub mod router;
pub mod scene;
pub mod search;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
