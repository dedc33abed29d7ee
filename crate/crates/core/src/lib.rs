pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod params;
pub mod pretrain;
pub mod tensor;
pub mod train;
