//! Data-parallel map with a sequential fallback.
//!
//! Read-only evaluation loops (batch inference, threshold sweeps) go
//! through [`map_slice`]. With the `parallel` feature enabled the work is
//! spread over the rayon pool; without it the same closure runs in a plain
//! loop. Results come back in input order either way, and all reductions
//! happen sequentially on the collected vector, so outputs are identical
//! across both builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub(crate) fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
