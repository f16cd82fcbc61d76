//! HTTP inference service and CLI for the multiview expression recognizer.

pub mod api;
pub mod cli;
pub mod model;
