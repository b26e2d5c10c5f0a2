pub mod data_model;
pub mod eigen_analysis;
pub mod error;
pub mod linalg;
pub mod matern;
pub mod model_selection;
pub mod optim;
pub mod pipeline;
pub mod reconstruction;
pub mod rng;
pub mod sim_engine;
pub mod smoothing;
pub mod spatial_structure;
pub mod special;
pub mod tests_bootstrap;

pub use error::{Result, SpaceError};
