//! Prior-guided referring segmentation on synthetic audio-visual scenes.

pub mod cbcf;
pub mod distiller;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod io;
pub mod maskhead;
pub mod nn;
pub mod objectives;
pub mod semflow;
pub mod synthscene;

pub use error::{Error, Result};
