pub mod autodiff;
pub mod bench;
pub mod error;
pub mod filters;
pub mod fsutil;
pub mod gainnet;
pub mod metrics;
pub mod ssm;
pub mod trainer;

pub use error::{Error, Result};
