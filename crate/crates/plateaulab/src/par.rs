//! Data-parallel loop helpers with a sequential fallback.
//!
//! Every call site writes to disjoint data per index (or maps chunks that are
//! later reduced in index order), so the `parallel` feature changes wall time
//! only, never results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n` and collects results in index order.
#[cfg(feature = "parallel")]
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}
