pub mod algorithms;
pub mod autodiff;
pub mod cli;
pub mod environments;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod params;
pub mod tensor;
