//! Configuration, persistence, datasets and experiment runners.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod manifest;
pub mod pipeline;
