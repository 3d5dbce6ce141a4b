//! Scene-level fan-out helpers.
//!
//! Per-scene work (tokenization, generation, gradient computation) is pure,
//! so it can run on any number of threads; result order always matches the
//! input order, and callers reduce sequentially. That makes the `parallel`
//! build and the sequential fallback produce bit-identical numbers.

/// Map over items, in parallel when the `parallel` feature is enabled.
/// Output order matches input order.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map over items, in parallel when the `parallel` feature is enabled.
/// Output order matches input order.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Always-sequential map with the same signature as [`map_ordered`];
/// kept public so benchmarks can compare both execution paths.
pub fn map_sequential<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}
