//! Configuration, experiment sweeps, self-checks and the command line.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod selftest;
