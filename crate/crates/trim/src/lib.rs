//! IO, file formats, experiments and the command-line driver for
//! [`trim_core`].

pub mod commands;
pub mod config;
pub mod experiments;
pub mod format;
pub mod image;
pub mod pipeline;
pub mod report;
pub mod store;

pub use trim_core as core;
