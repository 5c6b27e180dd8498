//! Data-parallel helpers.
//!
//! All engine loops that fan out over slices, samples, volumes or gallery
//! entries go through [`map_indexed`]. With the `parallel` feature the work is
//! spread over the current rayon pool; without it (or after
//! `set_mode(Mode::Sequential)`) the same closure runs in a plain loop.
//! Results always come back in index order, and callers reduce them
//! sequentially, so output never depends on the worker count.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

/// Selects the execution mode process-wide. `Parallel` silently degrades to
/// sequential when the crate is built without the `parallel` feature.
pub fn set_mode(mode: Mode) {
    FORCE_SEQUENTIAL.store(mode == Mode::Sequential, Ordering::SeqCst);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Number of workers the parallel path would use right now.
pub fn workers() -> usize {
    match mode() {
        Mode::Sequential => 1,
        #[cfg(feature = "parallel")]
        Mode::Parallel => rayon::current_num_threads(),
        #[cfg(not(feature = "parallel"))]
        Mode::Parallel => 1,
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Maps over a slice, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_indexed(items.len(), |i| f(&items[i]))
}

/// Like [`map_indexed`] but short-circuits to the first error (lowest index).
pub fn try_map_indexed<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}
