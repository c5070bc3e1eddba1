pub mod annotation;
pub mod classifier;
pub mod codes;
pub mod corpus;
pub mod error;
pub mod labels;
pub mod satisfaction;
pub mod simgen;
pub mod trends;

pub use codes::{CodeSet, MiCategory, MiCode};
pub use error::{Error, Result};
