//! IO, networking and command-line workflows around `memeaudit-core`.
//!
//! The layers, bottom up: dataset manifests and rasters on disk
//! ([`manifest`], [`imageio`]), the append-only response ledger
//! ([`ledger`]), the chat/embedding HTTP client ([`client`]), a scriptable
//! mock endpoint ([`mock`]), run configuration ([`config`]), and the
//! eval / leaderboard / audit / typology / agreement workflows
//! ([`commands`]) with their report writers ([`report`]).

pub mod client;
pub mod commands;
pub mod config;
pub mod imageio;
pub mod ledger;
pub mod manifest;
pub mod mock;
pub mod report;

pub use memeaudit_core as core;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
