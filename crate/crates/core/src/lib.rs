pub mod data;
pub mod engine;
pub mod eval;
pub mod linear;
pub mod loss;
pub mod models;
pub mod suite;
pub mod train;
