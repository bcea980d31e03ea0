pub mod dataset;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod nn;
pub mod par;
pub mod report;
pub mod trainers;
pub mod zoo;

pub use error::{Error, Result};
