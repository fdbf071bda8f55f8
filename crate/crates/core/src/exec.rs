//! Execution policy for the data-parallel loops (batch scoring, MI sweeps,
//! large matrix kernels).
//!
//! With the `parallel` feature disabled every policy degrades to a plain
//! sequential loop, so results never depend on the feature set: work items are
//! always computed independently and merged by index.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How an indexed batch of independent work items is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this build can actually run work items concurrently.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }
}

/// Number of multiply-adds above which the matrix kernels split rows across
/// threads.
#[cfg(feature = "parallel")]
const PAR_WORK_THRESHOLD: usize = 1 << 18;

/// Runs `f(row_index, row)` over consecutive `row_len` chunks of `data`.
pub(crate) fn for_each_row(data: &mut [f64], row_len: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= PAR_WORK_THRESHOLD {
        data.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}
