//! Order-preserving data-parallel helpers.
//!
//! Every use site maps independent units of work (sets, batches, episodes,
//! candidate subsets) through a function of the unit index. Results are
//! collected in index order, so the `parallel` feature changes wall-clock
//! time, never values.

#[cfg(feature = "parallel")]
pub(crate) fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Like [`indexed_map`] but for fallible work; returns the first error by
/// index order.
pub(crate) fn try_indexed_map<T, F>(n: usize, f: F) -> crate::error::Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> crate::error::Result<T> + Sync + Send,
{
    indexed_map(n, f).into_iter().collect()
}
