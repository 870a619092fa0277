//! Thin dispatch layer between rayon and plain loops.
//!
//! Every parallel construct here is deterministic by design: workers write
//! disjoint output slices and reductions combine fixed-size chunks in index
//! order, so a run produces bit-identical results whether the `parallel`
//! feature is on, off, or running on any number of threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs `body(i, chunk_i)` for every equally sized chunk of `out`.
///
/// `out.len()` must be a multiple of `chunk`. Each chunk is owned by exactly
/// one invocation, so the parallel and sequential paths write identical data.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, body: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| body(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            body(i, c);
        }
    }
}

/// Maps `body` over `0..n` and collects the results in index order.
pub fn map_indexed<R, F>(n: usize, body: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(body).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(body).collect()
    }
}
