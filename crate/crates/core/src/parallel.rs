//! Data-parallel helpers with a sequential fallback.
//!
//! Everything here is *order-preserving*: parallel maps collect results in
//! input order and reductions fold fixed-size chunks sequentially, so a
//! build with the `parallel` feature produces bit-identical numbers to a
//! build without it. Callers never talk to rayon directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// True when this build actually fans work out across threads.
pub const PARALLEL_ENABLED: bool = cfg!(feature = "parallel");

/// Maps `f` over `items`, preserving input order in the output.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over indices `0..n`, preserving index order in the output.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Splits `0..n` into fixed `chunk`-sized ranges, maps each range to a
/// partial vector, then folds the partials *in range order*. The chunk size
/// is part of the call, not derived from thread count, so the grouping (and
/// therefore every floating-point sum order) is identical on all builds.
pub fn sum_partials<F>(n: usize, chunk: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>) -> Vec<f64> + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    let ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(n))
        .collect();
    let partials = map_collect(&ranges, |r| f(r.clone()));
    let mut acc = vec![0.0; dim];
    for p in &partials {
        assert_eq!(p.len(), dim, "partial length mismatch");
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Runs `f(row_index, row_slice)` over consecutive `row_len` slices of `out`.
pub fn for_each_row<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(row_len > 0 && out.len() % row_len == 0, "ragged row split");
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}
