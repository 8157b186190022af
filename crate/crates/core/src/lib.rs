//! Multi-scale progressive GAN training on desk-scale testbeds.
//!
//! The crate is layered bottom-up: [`tensor`] provides dense arrays with a
//! reverse-mode tape, [`nn`] the layers and optimizers, [`dema`] and
//! [`gctdrn`] the attention and residual blocks, [`models`] the networks and
//! adversarial losses, [`apfl`] the feedback-driven training loop,
//! [`balance`] the DQN referee and [`harness`] datasets, metrics, checkpoints
//! and the CLI plumbing.

pub mod apfl;
pub mod balance;
pub mod dema;
pub mod error;
pub mod gctdrn;
pub mod harness;
pub mod models;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
