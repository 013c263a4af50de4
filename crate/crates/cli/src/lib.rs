//! `lw` command-line driver and session service.

pub mod commands;
pub mod exit;
pub mod server;
