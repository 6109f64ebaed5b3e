pub mod autodiff;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod mixer;
pub mod perturb;
pub mod variance_lab;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Scalar, Tensor};
