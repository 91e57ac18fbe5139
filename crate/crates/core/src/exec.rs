//! Execution policy for the data-parallel loops (path simulation, regression
//! sums, batch verification).
//!
//! Every parallel loop in the crate goes through these helpers. Work is split
//! into fixed-size chunks and partial results are combined in chunk order, so
//! the output is bitwise identical for [`Execution::Sequential`] and
//! [`Execution::Parallel`] and does not depend on the worker count.

/// Chunk length used by ordered reductions.
pub const REDUCE_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise runs
    /// sequentially.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
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

/// Calls `f(i, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(exec: Execution, data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Ordered reduction over `0..n`: each [`REDUCE_CHUNK`]-sized index range is
/// folded by `fold`, and the chunk partials are merged left to right.
pub fn chunked_reduce<A, Fold, Merge>(
    exec: Execution,
    n: usize,
    identity: impl Fn() -> A + Sync + Send,
    fold: Fold,
    merge: Merge,
) -> A
where
    A: Send,
    Fold: Fn(A, usize) -> A + Sync + Send,
    Merge: Fn(A, A) -> A,
{
    let n_chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indexed(exec, n_chunks, |c| {
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        (lo..hi).fold(identity(), &fold)
    });
    partials.into_iter().fold(identity(), merge)
}
