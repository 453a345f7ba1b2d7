//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) [`map`] fans out over the rayon
//! pool; without it, or through [`map_sequential`], items are processed in
//! order on the calling thread. Output order always matches input order, so
//! results are identical either way.

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_sequential(items, f)
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Whether [`map`] actually runs on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
