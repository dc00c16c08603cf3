pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod spatial;
pub mod stu;
pub mod stubs;
pub mod temporal;
pub mod tensor;
pub mod toy;
pub mod training;

pub use config::TcveConfig;
pub use error::{Error, Result};
pub use model::TcveModel;
pub use tensor::{DType, Scalar, Tensor};
