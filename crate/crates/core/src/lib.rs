pub mod descriptors;
pub mod error;
pub mod losses;
pub mod network;
pub mod optimizer;
pub mod reconstructor;
pub mod sa;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
