//! Counter-based random streams.
//!
//! A stream is identified by an [`RngStreamKey`]; the key is hashed to a
//! 64-bit state and the stream is the SplitMix64 sequence from that state.
//! Any position can be read directly, so draws do not depend on execution
//! order or on how individuals are split across workers.

use rand::RngCore;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Derives an independent master seed for a pipeline stage.
pub fn derive_seed(master_seed: u64, tag: &str) -> u64 {
    splitmix64(splitmix64(master_seed ^ 0x5EED) ^ fnv1a(tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStreamKey {
    pub master_seed: u64,
    pub purpose: &'static str,
    pub draw_index: u64,
    pub individual_index: u64,
}

impl RngStreamKey {
    pub fn new(master_seed: u64, purpose: &'static str, draw_index: u64, individual_index: u64) -> Self {
        Self {
            master_seed,
            purpose,
            draw_index,
            individual_index,
        }
    }

    pub fn state(&self) -> u64 {
        let mut h = splitmix64(self.master_seed);
        h = splitmix64(h ^ fnv1a(self.purpose));
        h = splitmix64(h ^ self.draw_index.wrapping_mul(GOLDEN_GAMMA));
        splitmix64(h ^ self.individual_index.wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    pub fn stream(&self) -> CounterStream {
        CounterStream::new(self.state())
    }
}

#[derive(Debug, Clone)]
pub struct CounterStream {
    state: u64,
    counter: u64,
}

impl CounterStream {
    pub fn new(state: u64) -> Self {
        Self { state, counter: 0 }
    }

    /// The `index`-th 64-bit output, independent of the sequential cursor.
    #[inline]
    pub fn u64_at(&self, index: u64) -> u64 {
        splitmix64(self.state.wrapping_add(GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1))))
    }

    /// Uniform on `[0, 1)` at position `index`.
    #[inline]
    pub fn uniform_at(&self, index: u64) -> f64 {
        (self.u64_at(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CounterStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let v = self.u64_at(self.counter);
        self.counter += 1;
        v
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}
