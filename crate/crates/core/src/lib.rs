pub mod cli;
pub mod config;
pub mod dirichlet;
pub mod ergodic;
pub mod error;
pub mod export;
pub mod fd;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod report;
pub mod sim;
