//! Queueing lab for FCFS clusters serving multi-server jobs.

pub mod drift;
pub mod fluid;
pub mod model;
pub mod oracle;
pub mod sim;
pub mod stats;
pub mod experiments;
pub mod config;
pub mod svg;
pub mod cli;
