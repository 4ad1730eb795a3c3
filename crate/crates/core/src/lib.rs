pub mod basis;
pub mod error;
pub mod family;
pub mod linalg;
pub mod moments;
pub mod osmee;
pub mod predictor;
pub mod simlab;
pub mod working_fit;

pub use error::{OsmeeError, Result};
