pub mod error;
pub(crate) mod graph;
pub mod params;
pub mod tensor;

pub mod codec;
pub mod denoiser;
pub mod designhelper;
pub mod diffusion;
pub mod evaluator;
pub mod optim;
pub mod prompt;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
