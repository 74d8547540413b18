pub mod attention;
pub mod autodiff;
pub mod cells;
pub mod data;
pub mod error;
pub mod eval;
pub mod global_context;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod training;

pub use error::{Error, Result};
