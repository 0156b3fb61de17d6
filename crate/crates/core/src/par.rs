//! Data-parallel loop helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the identical closure sequentially. Every helper partitions work so that
//! each output element is written by exactly one closure invocation, which
//! keeps results bit-identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of scalar elements handed to one rayon task.
#[cfg(feature = "parallel")]
const MIN_TASK_ELEMS: usize = 4096;

/// Call `f(row_index, row)` for every `row_len`-sized chunk of `data`.
pub fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let min_rows = (MIN_TASK_ELEMS / row_len).max(1);
        data.par_chunks_mut(row_len)
            .with_min_len(min_rows)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Like [`for_each_row`] but walks two equally-partitioned buffers in lockstep.
pub fn for_each_row2<T, U, F>(a: &mut [T], a_len: usize, b: &mut [U], b_len: usize, f: F)
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut [T], &mut [U]) + Send + Sync,
{
    if a_len == 0 || b_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        let min_rows = (MIN_TASK_ELEMS / a_len.max(b_len)).max(1);
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .with_min_len(min_rows)
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks_mut(a_len)
            .zip(b.chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (ra, rb))| f(i, ra, rb));
    }
}

/// Map over independent work items, preserving input order in the output.
pub fn map<I, R, F>(items: Vec<I>, f: F) -> Vec<R>
where
    I: Send,
    R: Send,
    F: Fn(I) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Whether the crate was built with the rayon backend.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
