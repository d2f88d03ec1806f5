//! Execution-strategy switch between sequential and data-parallel loops.
//!
//! The hot loops of the crate (agent round fan-out, sensitivity columns,
//! penetration-sweep levels) are written against [`map_indices`], which runs
//! them either sequentially or on the rayon thread pool. Both paths preserve
//! input order, so results are bitwise identical regardless of strategy or
//! worker count — determinism of the simulation logs never depends on the
//! schedule.
//!
//! The `parallel` cargo feature (on by default) compiles the rayon path in;
//! without it [`Execution::Parallel`] silently degrades to the sequential
//! loop, so library code never needs feature gates of its own.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How order-independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// Plain in-order loop on the calling thread.
    Sequential,
    /// Rayon work-stealing pool (order-preserving collect). Falls back to
    /// the sequential loop when the `parallel` feature is compiled out.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_indices<U, F>(exec: Execution, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        Execution::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

/// Runs `f` inside a rayon pool with exactly `workers` threads when
/// requested (and the `parallel` feature is compiled in); otherwise runs it
/// on the ambient pool / current thread.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        #[cfg(feature = "parallel")]
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("rayon pool")
            .install(f),
        _ => f(),
    }
}
