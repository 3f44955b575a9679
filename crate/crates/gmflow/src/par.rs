//! Data-parallel helpers with a sequential fallback.
//!
//! Everything here is deterministic: work is split into fixed chunks and
//! reductions always combine chunk results in index order, so outputs are
//! bit-identical whether the `parallel` feature is enabled or not, and for
//! any worker-thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Honors the `GMFLOW_THREADS` env var by capping the global rayon pool.
/// Call once at process start; later calls are no-ops.
pub fn init_thread_pool_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("GMFLOW_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore the error: the pool may already be initialized.
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
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

/// Sequential twin of [`map_indexed`], kept unconditionally for benchmarks.
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Splits `0..n` into chunks of `chunk` items, maps each chunk to a partial
/// result, then folds the partials in chunk order. The fold order is fixed,
/// so floating-point reductions are reproducible.
pub fn chunked_reduce<U, M, R>(n: usize, chunk: usize, map: M, mut reduce: R) -> Option<U>
where
    U: Send,
    M: Fn(std::ops::Range<usize>) -> U + Sync + Send,
    R: FnMut(U, U) -> U,
{
    let chunk = chunk.max(1);
    let ranges: Vec<_> = (0..n)
        .step_by(chunk)
        .map(|start| start..(start + chunk).min(n))
        .collect();
    let partials = {
        #[cfg(feature = "parallel")]
        {
            ranges.into_par_iter().map(&map).collect::<Vec<_>>()
        }
        #[cfg(not(feature = "parallel"))]
        {
            ranges.into_iter().map(&map).collect::<Vec<_>>()
        }
    };
    partials.into_iter().reduce(|a, b| reduce(a, b))
}

/// Runs `f` on disjoint chunks of `out`, passing each chunk its start offset.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i * chunk, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i * chunk, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_reduce_matches_sequential_sum() {
        let n = 10_001;
        let sum = chunked_reduce(
            n,
            97,
            |r| r.map(|i| i as f64).sum::<f64>(),
            |a, b| a + b,
        )
        .unwrap();
        let expect: f64 = (0..n).map(|i| i as f64).sum();
        assert_eq!(sum, expect);
    }

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(1000, |i| i * 2);
        assert_eq!(v, map_indexed_seq(1000, |i| i * 2));
    }
}
