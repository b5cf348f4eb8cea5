//! Counter-based deterministic hashing for seeded choices.
//!
//! Every stochastic decision in the pipeline (prompt pick, fraction
//! selection, judge order flip) is a pure function of a domain tag, the run
//! seed, and the sample's own key. No shared RNG stream exists, so worker
//! count and completion order cannot perturb any assignment.

use sha2::{Digest, Sha256};

pub fn hash64(domain: &str, seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Uniform value in [0, 1) derived from the same hash.
pub fn unit(domain: &str, seed: u64, parts: &[&str]) -> f64 {
    (hash64(domain, seed, parts) >> 11) as f64 / (1u64 << 53) as f64
}
