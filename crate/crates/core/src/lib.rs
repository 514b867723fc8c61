pub mod autodiff;
pub mod config;
pub mod corr;
pub mod cri;
pub mod csc;
pub mod encoders;
pub mod error;
pub mod field;
pub mod flowio;
pub mod net;
pub mod probes;
pub mod refine;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use config::{AggregateMode, CriAxes, InitMode, ModelConfig, OptimizerKind, QueryMode};
pub use error::{Error, Result};
pub use field::{FlowField, Resolution};
pub use tensor::{Element, Tensor};
pub use trainer::{init_params, ModelParams};
