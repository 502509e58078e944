pub mod augment;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod engine;
pub mod error;
pub mod oracle;
pub mod reweight;
pub mod teacher;

pub use error::{Error, Result};
