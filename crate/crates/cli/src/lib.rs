//! Experiment harness for the tilesparse library: tensor file IO, experiment
//! configuration, report emission, and the command-line driver.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod report;
pub mod tensor_file;
