//! Seed derivation and deterministic parallel reductions.
//!
//! Results must be byte-identical across runs and thread counts, so every
//! parallel reduction here uses fixed-size chunks combined in chunk order,
//! and every random draw comes from a ChaCha stream derived from the run
//! seed plus a purpose tag.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Derives an independent stream seed from a master seed and a purpose tag.
///
/// FNV-1a over the tag bytes mixed with the master seed; stable across
/// platforms and releases.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ master.rotate_left(17);
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= master;
    // final avalanche (splitmix64 tail)
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

pub fn seeded_rng(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}

/// Maps fixed-size index chunks in parallel and folds the partial results in
/// chunk order. The fold order is independent of the thread count, so
/// floating-point accumulations stay deterministic.
pub fn chunked_reduce<T, M, F>(len: usize, chunk: usize, map: M, mut fold: F, mut acc: T) -> T
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    F: FnMut(&mut T, T),
{
    assert!(chunk > 0);
    let ranges: Vec<std::ops::Range<usize>> =
        (0..len.div_ceil(chunk)).map(|i| i * chunk..((i + 1) * chunk).min(len)).collect();
    let partials: Vec<T> = ranges.into_par_iter().map(map).collect();
    for p in partials {
        fold(&mut acc, p);
    }
    acc
}

/// Round-half-up for non-negative values.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}
