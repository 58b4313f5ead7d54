//! TEDDN traffic-flow forecaster: model components, data pipeline and
//! training loop on top of `teddn-autograd`.

pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod cwam;
pub mod data;
pub mod embeddings;
pub mod experiment;
mod error;
pub mod gate;
pub mod gc;
pub mod gradcheck;
mod init;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod schedule;
pub mod synthetic;
pub mod te;
pub mod train;

pub use error::{Error, Result};
pub use model::{variant, ModelConfig, TeddnModel, TimeSlots, Variant};
pub use teddn_autograd as autograd;
