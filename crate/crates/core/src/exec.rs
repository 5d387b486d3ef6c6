//! Index-parallel map with a sequential fallback.
//!
//! Output order always follows the index order, so callers get identical
//! results regardless of thread count or whether the `parallel` feature is on.

/// Evaluates `f(0), .., f(len - 1)` in order on the current thread.
pub fn map_indices_seq<T, F>(len: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..len).map(f).collect()
}

/// Evaluates `f(0), .., f(len - 1)` on the rayon pool, preserving order.
#[cfg(feature = "parallel")]
pub fn map_indices_par<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..len).into_par_iter().map(f).collect()
}

/// Parallel when the `parallel` feature is enabled, sequential otherwise.
pub fn map_indices<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indices_par(len, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indices_seq(len, f)
    }
}

/// Like [`map_indices`] but short-circuits on the first error (by index order).
pub fn try_map_indices<T, E, F>(len: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indices(len, f).into_iter().collect()
}
