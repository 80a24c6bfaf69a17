pub mod anchors;
pub mod assign;
pub mod config;
pub mod cost;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nms;
pub mod pipeline;
pub mod sim;
pub mod uot;

pub use error::{Error, Result};
