pub mod combined;
pub mod correlation;
pub mod data;
pub mod gee;
pub mod inference;
pub mod cli;
pub mod linalg;
pub mod mean_model;
pub mod report;
pub mod simulation;
