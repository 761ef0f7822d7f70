//! Command line client, HTTP daemon and layered configuration for jobfront.

pub mod api;
pub mod cli;
pub mod client;
pub mod config;
pub mod server;
