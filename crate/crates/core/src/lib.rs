pub mod cli;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod nets;
pub mod phantom;
pub mod pipeline;
pub mod train;

pub use error::{Result, XctError};
