//! Sequential/parallel dispatch for data-parallel inner loops.
//!
//! With the `parallel` feature (default) the helpers fan work out over rayon;
//! without it they run the same loops sequentially. Every helper hands each
//! output element to exactly one closure call, so results are bit-identical
//! with the feature on or off and independent of the thread count.

/// Work below this many elements stays sequential even with `parallel` on.
const MIN_PAR_ELEMS: usize = 16 * 1024;

/// Run `f(row_index, row)` over consecutive `row_len` chunks of `data`.
pub fn for_each_row<T, F>(data: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if data.len() >= MIN_PAR_ELEMS {
            use rayon::prelude::*;
            data.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    for_each_row_seq(data, row_len, f);
}

/// Sequential twin of [`for_each_row`]; always available for benchmarks.
pub fn for_each_row_seq<T, F>(data: &mut [T], row_len: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, row) in data.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Map `f` over `0..n`, preserving order in the output.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Run two closures, concurrently when `parallel` is enabled.
pub fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        return rayon::join(a, b);
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}
