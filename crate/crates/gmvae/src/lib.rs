//! Storage, file formats and the experiment harness around `gmvae-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod specfile;
pub mod store;
pub mod wav;

pub use error::{AppError, AppResult};
