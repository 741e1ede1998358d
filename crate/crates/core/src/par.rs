//! Order-preserving map over batch elements.
//!
//! Work is split into fixed-size chunks whose partial results are combined
//! in index order, so the serial and the rayon builds produce identical bits.

use alloc::vec::Vec;

pub const CHUNK: usize = 16;

#[cfg(feature = "parallel")]
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Runs `f(range)` over consecutive chunks of `0..n`.
pub fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(core::ops::Range<usize>) -> T + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    map(chunks, |c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
}
