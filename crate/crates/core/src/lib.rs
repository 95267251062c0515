pub mod criteria;
pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod pruner;
pub mod rng;
pub mod tensor;
pub mod toybench;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
