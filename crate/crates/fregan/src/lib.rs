//! Middle-frame synthesis for frame rate doubling: a U-Net generator and a
//! patch discriminator trained adversarially with a pseudo-Huber objective,
//! plus the data plumbing, metrics and CLI around them. Everything runs on
//! the CPU with a hand-rolled reverse-mode tape so training is reproducible
//! bit for bit.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tape;
pub mod training;
pub mod tensor;
pub mod threads;

pub use error::{Error, Result};
