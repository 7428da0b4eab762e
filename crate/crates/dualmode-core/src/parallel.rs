//! Data-parallel map with a sequential fallback. Results come back ordered by
//! index, so reductions over them are deterministic regardless of the feature
//! set or thread count.

#[cfg(feature = "parallel")]
pub fn map_indices<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}
