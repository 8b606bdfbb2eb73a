pub mod autograd;
pub mod bench;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod msd;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod weights;
