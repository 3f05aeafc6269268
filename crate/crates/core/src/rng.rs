//! Seeded, label-addressed random streams.
//!
//! Every random quantity in the crate is drawn from an [`RngStream`] derived
//! from a `(root_seed, label)` pair. Uniform output is the SplitMix64 finalizer
//! applied to `key + (counter + 1) * GAMMA`, so the sequence is a pure function
//! of the key and the position. Normals come from the Box–Muller transform.

use std::f64::consts::PI;

/// Name recorded in run metadata so that outputs stay auditable.
pub const GENERATOR_NAME: &str = "splitmix64-counter+box-muller";

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// FNV-1a, then a mixing round so that short labels spread over all 64 bits.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(h)
}

/// A single-owner deterministic random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    label: String,
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

/// Derives the stream identified by `(root_seed, label)`.
///
/// Panics if `label` is empty.
pub fn derive_stream(root_seed: u64, label: &str) -> RngStream {
    assert!(!label.is_empty(), "stream label must be nonempty");
    let key = mix64(root_seed.wrapping_add(GAMMA) ^ label_hash(label));
    RngStream {
        root_seed,
        label: label.to_owned(),
        key,
        counter: 0,
        spare: None,
    }
}

impl RngStream {
    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of raw 64-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// A fresh stream under the same root seed, labelled `"{self.label}/{child}"`.
    ///
    /// The child does not depend on how far `self` has advanced.
    pub fn split(&self, child: &str) -> RngStream {
        derive_stream(self.root_seed, &format!("{}/{}", self.label, child))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound` (Lemire's multiply-shift with rejection).
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_below needs a positive bound");
        let bound = bound as u64;
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(bound);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// One standard normal variate.
    ///
    /// Box–Muller yields pairs; the second member is kept for the next call.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the logarithm is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_gaussian();
        }
    }

    pub fn gaussian_vec(&mut self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        self.fill_gaussian(&mut out);
        out
    }

    /// `k` distinct indices from `0..n`, uniformly, in selection order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} distinct items out of {n}");
        // Partial Fisher-Yates on a sparse permutation keeps this O(k).
        let mut swapped: Vec<(usize, usize)> = Vec::with_capacity(k);
        let lookup = |swapped: &[(usize, usize)], i: usize| {
            swapped
                .iter()
                .rev()
                .find(|(at, _)| *at == i)
                .map_or(i, |(_, v)| *v)
        };
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let j = i + self.next_below(n - i);
            let vi = lookup(&swapped, i);
            let vj = lookup(&swapped, j);
            out.push(vj);
            swapped.push((j, vi));
            swapped.push((i, vj));
        }
        out
    }
}
