//! Execution strategy for data-parallel loops.
//!
//! Every batch-shaped computation in this crate (rollouts, per-trajectory
//! gradients, probe rescoring) goes through [`map_indexed`], which preserves
//! input order regardless of how work is scheduled. With the `parallel`
//! feature the work runs on a rayon pool; without it, or with
//! `Parallelism::Sequential`, it runs on the calling thread. Both paths
//! produce identical output vectors, so reductions done afterwards in index
//! order are bit-reproducible.

/// How to schedule batch work.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Parallelism {
    /// Use the global rayon pool (or sequential if the feature is off).
    #[default]
    Default,
    /// Force single-threaded execution.
    Sequential,
    /// Use a dedicated pool with this many threads.
    Threads(usize),
}

impl Parallelism {
    /// Interpret a CLI/config integer: 0 = default pool, 1 = sequential,
    /// n > 1 = dedicated pool of n threads.
    pub fn from_flag(n: usize) -> Self {
        match n {
            0 => Parallelism::Default,
            1 => Parallelism::Sequential,
            n => Parallelism::Threads(n),
        }
    }
}

/// Apply `f` to each index in `0..n`, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, par: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    match par {
        Parallelism::Sequential => (0..n).map(f).collect(),
        Parallelism::Default => (0..n).into_par_iter().map(f).collect(),
        Parallelism::Threads(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .expect("failed to build thread pool");
            pool.install(|| (0..n).into_par_iter().map(f).collect())
        }
    }
}

/// Apply `f` to each index in `0..n`, returning results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, _par: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
