pub mod attack;
pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod probe;
pub mod report;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
