//! Seeded random streams.
//!
//! Every stochastic operation draws from an explicit PCG32 stream
//! (`rand_pcg::Pcg32`, the XSH-RR 64/32 generator). A stream is identified by
//! a `(seed, stream)` pair: `seed` initializes the 64-bit LCG state and
//! `stream` selects the LCG increment, so two streams with the same seed but
//! different ids never overlap in practice.

use rand::Rng;
pub use rand_pcg::Pcg32;

pub fn stream(seed: u64, stream: u64) -> Pcg32 {
    Pcg32::new(seed, stream)
}

/// Mixes a seed with a tag into a fresh 64-bit seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal draw via Box-Muller (one value per call).
pub fn normal(rng: &mut Pcg32) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates shuffle of `items` driven by `rng`.
pub fn shuffle<T>(items: &mut [T], rng: &mut Pcg32) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let a: Vec<u32> = (0..8).map({
            let mut r = stream(42, 7);
            move |_| r.gen()
        }).collect();
        let b: Vec<u32> = (0..8).map({
            let mut r = stream(42, 7);
            move |_| r.gen()
        }).collect();
        assert_eq!(a, b);
        let mut other = stream(42, 8);
        let c: Vec<u32> = (0..8).map(|_| other.gen()).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        shuffle(&mut v, &mut stream(1, 0));
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
