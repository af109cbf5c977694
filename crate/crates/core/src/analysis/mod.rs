//! Learning curves, prompt clustering, prerequisite worlds and recipes.

pub mod cluster;
pub mod curves;
pub mod recipe;
pub mod world;
