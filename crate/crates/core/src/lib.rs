pub mod autodiff;
pub mod error;
pub mod layers;
mod linalg;
pub mod params;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{Mode, ParamId, ParamStore, Session};
pub use tensor::Tensor;
pub mod backbone;
pub mod config;
pub mod data;
pub mod explain;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod orh;
pub mod sfmm;
pub mod train;
