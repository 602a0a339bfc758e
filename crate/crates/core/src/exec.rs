//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order, so reductions performed by
//! the caller are independent of thread scheduling. Without the `parallel`
//! feature, [`Execution::Parallel`] silently runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `f(0), f(1), …, f(n-1)` collected in order.
pub fn map_range<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Map over a slice, preserving order.
pub fn map_slice<I, T, F>(exec: Execution, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Fill `out[i] = f(i)` in place, in row blocks when parallel.
pub fn fill_indexed<T, F>(exec: Execution, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && out.len() >= 256 {
        use rayon::prelude::*;
        out.par_chunks_mut(128)
            .enumerate()
            .for_each(|(block, chunk)| {
                for (j, slot) in chunk.iter_mut().enumerate() {
                    *slot = f(block * 128 + j);
                }
            });
        return;
    }
    let _ = exec;
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Configure the global rayon pool. A no-op without the `parallel` feature
/// or when the pool was already initialised.
pub fn set_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_in_both_modes() {
        let a = map_range(Execution::Sequential, 1000, |i| i * i);
        let b = map_range(Execution::Parallel, 1000, |i| i * i);
        assert_eq!(a, b);
        let mut out = vec![0usize; 1000];
        fill_indexed(Execution::Parallel, &mut out, |i| i + 1);
        assert_eq!(out[999], 1000);
    }
}
