//! Round barrier with the external trainer.
//!
//! After the SFT file of round `t` is written, the trainer fine-tunes the
//! attacker, serves it, and writes `rounds/<t>/attacker.ready` containing the
//! served checkpoint digest. Rewards for round `t` are computed only after
//! that file appears (and, optionally, after the attacker's `/health`
//! reports the same digest).

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::time::Instant;

use super::GameError;
use crate::llm_client::{EndpointSpec, LlmClient};
use crate::persist::write_atomic;

pub const READY_FILE: &str = "attacker.ready";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandshakeConfig {
    pub timeout_ms: u64,
    pub poll_interval_ms: u64,
    /// Also require the attacker's health document to report the digest.
    pub verify_health: bool,
    /// Write the acknowledgement ourselves (mock runs without a trainer).
    pub auto_ack: bool,
}

impl Default for HandshakeConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 3_600_000,
            poll_interval_ms: 1_000,
            verify_health: false,
            auto_ack: false,
        }
    }
}

/// Hex sha256 of a file's bytes.
pub fn file_digest(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes the ready file for a round directory.
pub fn acknowledge(round_dir: &Path, digest: &str) -> std::io::Result<()> {
    write_atomic(&round_dir.join(READY_FILE), format!("{digest}\n").as_bytes())
}

fn read_ready(round_dir: &Path) -> Option<String> {
    let text = std::fs::read_to_string(round_dir.join(READY_FILE)).ok()?;
    let digest = text.trim();
    (!digest.is_empty()).then(|| digest.to_owned())
}

/// Blocks until the attacker for `round` is acknowledged; returns its digest.
pub async fn await_attacker(
    round_dir: &Path,
    round: usize,
    cfg: &HandshakeConfig,
    client: &LlmClient,
    attacker: &EndpointSpec,
) -> Result<String, GameError> {
    let started = Instant::now();
    let deadline = started + Duration::from_millis(cfg.timeout_ms);
    let poll = Duration::from_millis(cfg.poll_interval_ms.max(1));
    loop {
        if let Some(digest) = read_ready(round_dir) {
            if !cfg.verify_health {
                return Ok(digest);
            }
            match client.health(attacker).await {
                Ok(doc) if doc.get("checkpoint_digest").and_then(|d| d.as_str()) == Some(digest.as_str()) => {
                    return Ok(digest)
                }
                Ok(_) => tracing::debug!(round, "attacker serves a different checkpoint"),
                Err(e) => tracing::debug!(round, error = %e, "attacker health check failed"),
            }
        }
        if Instant::now() + poll > deadline {
            return Err(GameError::AttackerNotUpdated {
                round,
                waited_ms: started.elapsed().as_millis() as u64,
            });
        }
        tokio::time::sleep(poll).await;
    }
}
