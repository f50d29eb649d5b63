//! Command line client, local API server and HTTP repository transport.

pub mod api;
pub mod commands;
pub mod config;
pub mod repository;
pub mod server;
pub mod views;
