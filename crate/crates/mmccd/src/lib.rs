pub mod cli;
pub mod data;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod pipelines;
