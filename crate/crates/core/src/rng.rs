//! Deterministic pseudorandom generation: splitmix64 and xoshiro256**.
//!
//! Both generators are spelled out here instead of pulled from a crate because
//! the exact bit stream is part of the detection contract: a secret vector must
//! be reproducible from a 64-bit seed on any platform, in any language.

/// One step of the splitmix64 sequence, advancing `state` in place.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// xoshiro256** with the reference state-update and output functions.
#[derive(Debug, Clone)]
pub struct Xoshiro256StarStar {
    s: [u64; 4],
}

impl Xoshiro256StarStar {
    /// Seed the four state words with consecutive splitmix64 outputs.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        Self {
            s: [
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
                splitmix64(&mut sm),
            ],
        }
    }

    /// Construct from raw state words. Used to check the reference sequence.
    #[cfg(test)]
    pub(crate) fn from_state(s: [u64; 4]) -> Self {
        Self { s }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1): top 53 bits scaled by 2^-53.
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform in (0, 1): an exact zero from [`next_unit`](Self::next_unit)
    /// is replaced by 2^-53.
    #[inline]
    pub fn next_unit_open(&mut self) -> f64 {
        const MIN: f64 = 1.0 / (1u64 << 53) as f64;
        let x = self.next_unit();
        if x == 0.0 {
            MIN
        } else {
            x
        }
    }

    /// Uniform integer in [0, n) by rejection, bias-free.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }
}
