//! Infrared small-target detector with a re-parameterisable backbone, a
//! bidirectional fusion neck, and training-only contrastive losses.

pub mod backbone;
pub mod cadd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod init;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod params;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
