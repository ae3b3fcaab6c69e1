pub mod cli;
pub mod degrade;
pub mod down;
pub mod error;
pub mod eval;
pub mod infer;
pub mod io;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod up;

pub use error::{Error, Result};
