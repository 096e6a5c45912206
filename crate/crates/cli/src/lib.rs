//! Config-driven experiment harness around `aub-core`.

pub mod commands;
pub mod config;
