//! Experiment harness: datasets, configuration presets, training, and
//! report emission for the command line tool.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod report;
pub mod train;
