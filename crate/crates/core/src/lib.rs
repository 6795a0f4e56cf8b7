pub mod autodiff;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Scalar, Tensor};
