pub mod config;
pub mod data;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod render;
pub mod tensor;
pub mod train;
