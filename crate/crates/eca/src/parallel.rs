//! Fixed-chunk fan-out over sample indices.
//!
//! Batches are cut into fixed 64-sample chunks by index; each chunk is mapped
//! independently (in parallel with the `parallel` feature, sequentially
//! without) and the partial results are folded in chunk order. Chunk
//! boundaries do not depend on the thread count, so both modes produce
//! bit-identical sums.

pub(crate) const CHUNK: usize = 64;

/// Ranges [start, end) covering 0..n in fixed chunks.
pub(crate) fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n.div_ceil(CHUNK));
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        out.push((start, end));
        start = end;
    }
    out
}

/// Map every chunk range and collect results in chunk order.
pub(crate) fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn((usize, usize)) -> T + Sync + Send,
{
    map_chunks_forced(n, f, cfg!(feature = "parallel"))
}

/// Same with an explicit mode; the benchmarks compare both paths inside one
/// build.
pub(crate) fn map_chunks_forced<T, F>(n: usize, f: F, parallel: bool) -> Vec<T>
where
    T: Send,
    F: Fn((usize, usize)) -> T + Sync + Send,
{
    let ranges = chunk_ranges(n);
    map_ranges(ranges, f, parallel)
}

fn map_ranges<T, F>(ranges: Vec<(usize, usize)>, f: F, parallel: bool) -> Vec<T>
where
    T: Send,
    F: Fn((usize, usize)) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            return ranges.into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    ranges.into_iter().map(f).collect()
}
