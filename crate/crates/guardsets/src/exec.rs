//! Data-parallel helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (the default) these fan out over rayon;
//! without it they degrade to plain iteration and rayon is not compiled in.
//! Callers pass a runtime flag so benches can compare both paths in one
//! binary and `--jobs 1` means what it says.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Number of worker threads to use for `jobs = n`. `0` picks the rayon
/// default (one per core).
#[cfg(feature = "parallel")]
pub fn configure_jobs(jobs: usize) {
    if jobs > 0 {
        // Ignore the error: the global pool can only be built once.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_jobs(_jobs: usize) {}

pub fn parallel_compiled() -> bool {
    cfg!(feature = "parallel")
}

/// Map over a slice, in parallel when both compiled and requested.
/// Output order always matches input order.
pub fn map_vec<T, R, F>(items: &[T], parallel: bool, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_iter().map(&f).collect();
    }
    let _ = parallel;
    items.iter().map(&f).collect()
}

/// In-place update of every element, in parallel when compiled and requested.
pub fn for_each_mut<T, F>(items: &mut [T], parallel: bool, f: F)
where
    T: Send,
    F: Fn(&mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        items.par_iter_mut().for_each(&f);
        return;
    }
    let _ = parallel;
    items.iter_mut().for_each(&f);
}
