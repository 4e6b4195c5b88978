//! Sequential/parallel batch mapping used by population evaluations and
//! per-cell fits. The parallel path preserves input order, so callers see
//! identical results with or without the `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for an independent batch of pure computations.
///
/// `Rayon` degrades to sequential iteration when the crate is built
/// without the `parallel` feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Rayon,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }
}

/// Maps `f` over `items`, in parallel when built with the `parallel` feature.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_with(Parallelism::default(), items, f)
}

/// Like [`map`] but with an explicit strategy; the benches use this to
/// compare the two paths within one build.
pub fn map_with<T, U, F>(mode: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => items.par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        Parallelism::Rayon => items.iter().map(f).collect(),
    }
}

/// Fallible variant of [`map`]; returns the first error by input order.
pub fn try_map<T, U, E, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        let results: Vec<Result<U, E>> = items.par_iter().map(f).collect();
        results.into_iter().collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
