//! Operator surface for the regional-prior super-resolution engine: config
//! parsing, file IO, the threaded batch runner, and the CLI commands.

pub mod commands;
pub mod config;
pub mod io;
pub mod runner;
