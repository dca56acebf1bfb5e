pub mod config;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod interpreter;
pub mod model;
pub mod observer;
pub mod scene;
pub mod scm;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Architecture, LossWeights, Model, Variant};
