//! Command-line front end: configuration loading, the `gen-data`,
//! `train-ngm`, `run`, `bench` and `report` commands, and artifact I/O.

pub mod app;
pub mod commands;
pub mod config;
