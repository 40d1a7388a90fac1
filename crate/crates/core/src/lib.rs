pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod selfcheck;
pub mod synthetic;
pub mod trainer;

pub use scalar::Scalar;

/// Double-precision instantiations used by the trainer and the CLI.
pub type Tape = autodiff::Tape<f64>;
pub type Tensor = autodiff::Tensor<f64>;
pub type Model = model::Model<f64>;
pub type ParamSet = model::ParamSet<f64>;
