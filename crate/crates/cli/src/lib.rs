//! Command-line front end: run configs, problem files and command execution.

pub mod config;
pub mod problem_file;
pub mod run;
