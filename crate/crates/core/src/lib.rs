pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod flashback;
pub mod gradproj;
pub mod latent_bank;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tasks;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
