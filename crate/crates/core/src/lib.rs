pub mod datamatrix;
pub mod error;
pub mod freqdeconv;
pub mod matfun;
pub mod models;
pub mod ndpp;
pub mod syncsim;
pub mod tensor;

pub use error::{DivergenceReport, Error, Result};
pub use tensor::{DType, Graph, Scalar, Tensor, Var};
