//! Counter-based RNG streams, so results never depend on how independent
//! jobs (starts, grid cells, bootstrap replicates) are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for job `stream` under master seed `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child master seed from `(seed, index)`; used when a job
/// itself needs several streams (a grid cell running many starts).
pub fn child_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a mixed key
    let mut z = seed
        ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93)
        ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is on.
/// Output order always follows the index.
pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
