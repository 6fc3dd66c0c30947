//! Command-line pipeline and HTTP editing service.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod server;
