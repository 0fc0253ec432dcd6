//! Cross-resolution SAR target detection adaptation on a synthetic benchmark.

pub mod anchors;
pub mod bench;
pub mod cli;
pub mod diffcore;
pub mod engine;
pub mod error;
pub mod evidential;
pub mod imaging;
pub mod io;
pub mod rng;
pub mod rsaa;
pub mod scatter;
pub mod shfa;

pub use error::{Error, Result};
