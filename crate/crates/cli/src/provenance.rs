use serde::Serialize;
use sha2::{Digest, Sha256};

/// Seed and config digest stamped onto every artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

impl Provenance {
    pub fn of<T: Serialize>(seed: u64, config: &T) -> Self {
        Provenance {
            seed,
            config_digest: digest(config),
        }
    }
}

/// SHA-256 of the canonical JSON encoding.
pub fn digest<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(monoflow::bench::canonical_json(value).as_bytes()))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
