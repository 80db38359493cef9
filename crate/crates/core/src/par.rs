//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper produces its output in index order, so reductions performed
//! on the collected results are independent of the thread count. Building
//! without the `parallel` feature, or selecting [`Execution::Sequential`] at
//! runtime, yields bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runtime execution policy for the element and chunk loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `0..n` and collects in index order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Maps `f` over the items of a slice and collects in index order.
pub fn map_slice<'a, S, T, F>(exec: Execution, items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps `f` over fixed-size chunks of `items` (the last one may be shorter).
pub fn map_chunks<'a, S, T, F>(exec: Execution, items: &'a [S], chunk: usize, f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(usize, &'a [S]) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items
            .par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i, c))
            .collect();
    }
    let _ = exec;
    items.chunks(chunk).enumerate().map(|(i, c)| f(i, c)).collect()
}
