//! Federated training with split parameters: shared weights averaged on a
//! server, per-user embeddings kept on the clients.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{ParamSet, Tensor};
