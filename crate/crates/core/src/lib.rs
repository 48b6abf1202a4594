pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fsio;
pub mod gradcheck;
pub mod labels;
pub mod layers;
pub mod network;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
