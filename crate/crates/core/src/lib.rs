pub mod diffcore;
pub mod cte;
pub mod decoder;
pub mod layers;
pub mod masking;
pub mod toyvqa;
pub mod trainer;
pub mod error;
pub mod cli;
pub mod gradsuite;

pub use error::{Error, Result};
