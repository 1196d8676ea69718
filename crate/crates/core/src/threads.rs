use once_cell::sync::Lazy;
use rayon::ThreadPool;

/// Shared pool for the parallel convolution path. `OPNET_THREADS` caps the
/// worker count; unset means the rayon default. Parallel results are
/// bit-identical to sequential evaluation (disjoint output planes, fixed
/// per-plane reduction order).
static POOL: Lazy<ThreadPool> = Lazy::new(|| {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("OPNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
    {
        builder = builder.num_threads(n);
    }
    builder.build().expect("failed to build thread pool")
});

pub(crate) fn pool() -> &'static ThreadPool {
    &POOL
}

pub(crate) fn max_threads() -> usize {
    POOL.current_num_threads()
}
