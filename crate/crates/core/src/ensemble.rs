//! Replica fan-out.
//!
//! With the `parallel` feature (default) replicas are distributed over the
//! rayon pool; without it they run in order on the calling thread. Results
//! are always returned in replica order, so any reduction done afterwards is
//! independent of scheduling.

/// Evaluate `f(0..n)` and collect in index order.
pub fn map_replicas<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_replicas_parallel(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_replicas_sequential(n, f)
    }
}

pub fn map_replicas_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_replicas_parallel<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Environment variable overriding the worker count.
pub const THREADS_ENV: &str = "SRFLAB_THREADS";

/// Size the global pool from `SRFLAB_THREADS` if set. Returns the number of
/// workers in effect (1 without the `parallel` feature).
pub fn configure_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
        {
            // Fails only if the pool was already built; keep the existing one.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
