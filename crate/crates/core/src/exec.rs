//! Batch-level execution helpers.
//!
//! Independent work items (sequences to compress, models to evaluate, sweep
//! points) go through [`map`], which uses the rayon pool when the `parallel`
//! feature is enabled and a plain iterator otherwise. Output order always
//! matches input order, so reductions over the result are deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Like [`map`] over an index range.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, |&i| f(i))
}

/// Whether [`map`] runs on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
