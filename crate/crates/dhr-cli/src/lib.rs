//! Library surface of the batch CLI, exposed so integration tests can drive
//! the commands in-process.

pub mod commands;
pub mod config;
