use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic RNG stream for a `(seed, label)` pair.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    // FNV-1a over the label, folded into the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Draws an index with probability proportional to `weights`.
pub(crate) fn weighted_index(rng: &mut impl rand::Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}
