//! Seed derivation. Every stage draws from its own named sub-stream of one root seed,
//! so changing how many numbers one stage consumes never shifts another stage's draws.

use sha2::{Digest, Sha256};

/// Seed used when neither a flag, the environment nor a config file supplies one.
pub const DEFAULT_SEED: u64 = 20_240_917;

/// Environment variable consulted before the config file seed.
pub const SEED_ENV: &str = "CALIDET_SEED";

/// Named random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    World,
    Split,
    Sampler,
    Noise,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::World => "world",
            Stream::Split => "split",
            Stream::Sampler => "sampler",
            Stream::Noise => "noise",
        }
    }
}

fn digest_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

/// Seed of a named sub-stream.
pub fn substream(seed: u64, name: &str) -> u64 {
    digest_u64(&[&seed.to_le_bytes(), name.as_bytes()])
}

pub fn stream(seed: u64, s: Stream) -> u64 {
    substream(seed, s.name())
}

/// Per-image seed, independent of the order in which images are visited.
pub fn image_seed(seed: u64, image_id: u64) -> u64 {
    digest_u64(&[&seed.to_le_bytes(), b"image", &image_id.to_le_bytes()])
}

/// Resolves the effective seed: flag, then environment, then config, then the default.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: Option<u64>) -> Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(text) = env.map(str::trim).filter(|t| !t.is_empty()) {
        return text.parse().map_err(|_| format!("{SEED_ENV}={text:?} is not an unsigned integer"));
    }
    Ok(config.unwrap_or(DEFAULT_SEED))
}
