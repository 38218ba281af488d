pub mod anm;
pub mod basis;
pub mod cfu;
pub mod config;
pub mod correlation;
pub mod error;
pub mod graph;
pub mod gridtool;
pub mod io;
pub mod linalg;
pub mod maxcfu;
pub mod modelsel;
pub mod pipeline;
pub mod predictor;
pub mod selftest;

pub use error::{Error, Result};
