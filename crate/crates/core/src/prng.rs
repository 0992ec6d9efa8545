//! Counter-based randomness for dropout masks.
//!
//! A mask bit depends only on `(seed, key, global flat index)`, so any
//! partitioning of the element space reproduces the same mask.

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform sample in `[0, 1)` for one counter position.
#[inline]
pub fn uniform(seed: u64, key: u64, index: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(key ^ splitmix64(index)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Multiplier applied to an element under inverted dropout: either zero or
/// `1 / (1 - rate)`.
#[inline]
pub fn dropout_scale(seed: u64, key: u64, index: u64, rate: f32) -> f32 {
    if rate <= 0.0 {
        1.0
    } else if uniform(seed, key, index) < rate as f64 {
        0.0
    } else {
        1.0 / (1.0 - rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_rate_is_close_to_target() {
        let kept = (0..100_000u64).filter(|&i| dropout_scale(7, 11, i, 0.1) > 0.0).count();
        let frac = kept as f64 / 100_000.0;
        assert!((frac - 0.9).abs() < 0.01, "{frac}");
    }

    #[test]
    fn streams_differ_by_key_and_seed() {
        let a: Vec<f32> = (0..64).map(|i| dropout_scale(1, 2, i, 0.5)).collect();
        let b: Vec<f32> = (0..64).map(|i| dropout_scale(1, 3, i, 0.5)).collect();
        let c: Vec<f32> = (0..64).map(|i| dropout_scale(2, 2, i, 0.5)).collect();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, (0..64).map(|i| dropout_scale(1, 2, i, 0.5)).collect::<Vec<_>>());
    }
}
