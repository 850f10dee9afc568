pub mod attention;
pub mod attnviz;
pub mod autodiff;
pub mod cli;
mod binfmt;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod runconfig;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, FormatError, Result};
pub use tensor::{Real, Tensor};
