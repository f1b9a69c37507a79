pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod lora;
pub mod model;
pub mod moe_ffn;
pub mod numerics;
pub mod params;
pub mod routing;
pub mod train;

pub use error::{MoleError, Result};
