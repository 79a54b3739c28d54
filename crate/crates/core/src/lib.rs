pub mod autodiff;
pub mod backbones;
pub mod ecse;
pub mod error;
pub mod harness;
pub mod kv;
pub mod smoothmath;
pub mod smoothproj;
pub mod structures;
pub mod training;

pub use error::{Error, Result};
