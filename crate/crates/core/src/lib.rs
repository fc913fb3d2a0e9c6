pub mod behavior;
pub mod config;
pub mod cyclevae;
pub mod embodsim;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod trajdata;

pub use error::{DataError, Error, Result};
