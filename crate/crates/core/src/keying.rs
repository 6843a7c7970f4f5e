//! Key material: per-step seeds and secret vectors derived from the master key
//! and the window of previous tokens.
//!
//! The hash preimage layout is part of the wire contract and is byte-exact:
//!
//! ```text
//! SHA-256( key bytes (32) || window width h as u32 LE || token ids as u32 LE,
//!          oldest window token first )
//! ```
//!
//! The seed is the first 8 digest bytes read big-endian. Including `h` in the
//! preimage keeps seed streams for different window widths from aliasing.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{splitmix64, Xoshiro256StarStar};

/// Length of a master key in bytes.
pub const KEY_LEN: usize = 32;

/// 256-bit master key. Parsed from a 64-hex-character string on the CLI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterKey {
    bytes: [u8; KEY_LEN],
}

impl MasterKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self { bytes }
    }

    /// Parse a 64-character hex string.
    pub fn from_hex(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.len() != 2 * KEY_LEN {
            return Err(Error::Config(format!(
                "master key must be {} hex characters, got {}",
                2 * KEY_LEN,
                s.len()
            )));
        }
        let mut bytes = [0u8; KEY_LEN];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hi = hex_digit(chunk[0])?;
            let lo = hex_digit(chunk[1])?;
            bytes[i] = hi << 4 | lo;
        }
        Ok(Self { bytes })
    }

    /// Expand a 64-bit seed into a full key via splitmix64. Convenience for
    /// harness runs that need many keys.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut bytes = [0u8; KEY_LEN];
        for chunk in bytes.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut sm).to_le_bytes());
        }
        Self { bytes }
    }

    pub fn to_hex(&self) -> String {
        self.bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }
}

fn hex_digit(c: u8) -> Result<u8> {
    match c {
        b'0'..=b'9' => Ok(c - b'0'),
        b'a'..=b'f' => Ok(c - b'a' + 10),
        b'A'..=b'F' => Ok(c - b'A' + 10),
        _ => Err(Error::Config(format!(
            "invalid hex character {:?} in master key",
            c as char
        ))),
    }
}

/// Per-step 64-bit seed, fully determined by (master key, window).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowSeed(pub u64);

/// Derive the per-step seed from the key and the window of the `h` previous
/// tokens, oldest first. `window.len()` must equal `h` (h = 0 means an empty
/// window and a fixed key for all steps).
pub fn derive_seed(key: &MasterKey, h: usize, window: &[u32]) -> Result<WindowSeed> {
    if window.len() != h {
        return Err(Error::Config(format!(
            "window length {} does not match configured h = {}",
            window.len(),
            h
        )));
    }
    let mut hasher = Sha256::new();
    hasher.update(key.bytes);
    hasher.update((h as u32).to_le_bytes());
    for &t in window {
        hasher.update(t.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    Ok(WindowSeed(u64::from_be_bytes(first)))
}

/// Pseudorandom vector in (0,1)^d expanded from a window seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SecretVector {
    entries: Vec<f64>,
}

impl SecretVector {
    pub(crate) fn from_entries(entries: Vec<f64>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }
}

/// Expand `seed` into `d` entries: xoshiro256** seeded by splitmix64, each
/// output mapped to (0,1) as (u >> 11) * 2^-53 with exact zeros replaced by
/// 2^-53.
pub fn secret_vector(seed: WindowSeed, d: usize) -> Result<SecretVector> {
    if d == 0 {
        return Err(Error::Config("secret vector dimension must be >= 1".into()));
    }
    let mut rng = Xoshiro256StarStar::from_seed(seed.0);
    let entries = (0..d).map(|_| rng.next_unit_open()).collect();
    Ok(SecretVector { entries })
}

/// Expand `d` entries and also return the following output of the same stream
/// as a uniform in [0,1). Watermarked multinomial draws consume exactly this
/// one extra output.
pub fn secret_vector_and_uniform(seed: WindowSeed, d: usize) -> Result<(SecretVector, f64)> {
    if d == 0 {
        return Err(Error::Config("secret vector dimension must be >= 1".into()));
    }
    let mut rng = Xoshiro256StarStar::from_seed(seed.0);
    let entries = (0..d).map(|_| rng.next_unit_open()).collect();
    Ok((SecretVector { entries }, rng.next_unit()))
}

/// Single coordinate of the secret vector without materializing the rest.
/// Detection only ever needs the entry at the observed token id.
pub fn secret_entry(seed: WindowSeed, index: usize) -> f64 {
    let mut rng = Xoshiro256StarStar::from_seed(seed.0);
    for _ in 0..index {
        rng.next_u64();
    }
    rng.next_unit_open()
}

/// Fill `buf` with the hash window for the step that appends a token after
/// `prefix`: the last `h` tokens of `prefix`, left-padded with token id 0 when
/// the prefix is shorter than `h`. Generation and detection pad identically.
pub fn hash_window_into(buf: &mut Vec<u32>, prefix: &[u32], h: usize) {
    buf.clear();
    if prefix.len() >= h {
        buf.extend_from_slice(&prefix[prefix.len() - h..]);
    } else {
        buf.resize(h - prefix.len(), 0);
        buf.extend_from_slice(prefix);
    }
}

/// Greenlist membership mask: `mask[i] = entries[i] < gamma`.
///
/// Per-coordinate thresholding gives i.i.d. Bernoulli(gamma) membership over
/// random seeds, so the greenlist has expected (not exact) size gamma * d.
pub fn greenlist_mask(v: &SecretVector, gamma: f64) -> Result<Vec<bool>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!(
            "gamma must lie strictly inside (0, 1), got {gamma}"
        )));
    }
    Ok(v.entries.iter().map(|&r| r < gamma).collect())
}
