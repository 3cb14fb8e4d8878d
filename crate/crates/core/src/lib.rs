pub mod act;
pub mod binconv;
pub mod bits;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod network;
pub mod param;
pub mod presets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
