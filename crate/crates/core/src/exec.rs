//! Data-parallel execution with a sequential fallback.
//!
//! Work is always split into the same indexed tasks, so results do not depend
//! on the execution mode or on the number of threads.

/// How independent tasks are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// Rayon work-stealing pool. Falls back to sequential when the crate is
    /// built without the `parallel` feature.
    Parallel,
    Sequential,
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

/// Evaluates `f(0), .., f(count - 1)` and returns the results in index order.
pub fn map_indexed<T, F>(exec: Execution, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let f = |i: usize| i * i;
        let a = map_indexed(Execution::Parallel, 1000, f);
        let b = map_indexed(Execution::Sequential, 1000, f);
        assert_eq!(a, b);
        assert_eq!(a[31], 961);
    }
}
