//! Parallel execution dispatch.
//!
//! Forward and backward kernels parallelize over disjoint output slices only;
//! every reduction runs in a fixed sequential order inside its slice. Results
//! are therefore bit-identical between the rayon path and the sequential
//! fallback, and independent of thread count. The `parallel` cargo feature
//! compiles the rayon path in or out; [`set_sequential`] switches it off at
//! runtime (used by `--deterministic` and by timing code).

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force all kernels onto the sequential path at runtime.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Whether the rayon path is compiled in and currently enabled.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !sequential_forced()
}

// Below this many output elements the spawn overhead dominates. Chunked
// kernels do real work per element (matmul rows, conv taps); elementwise
// fills do almost none, so they need far more elements to pay for a spawn.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 4096;
#[cfg(feature = "parallel")]
const PAR_THRESHOLD_ELEMENTWISE: usize = 1 << 17;

/// Apply `f(slice_index, slice)` to consecutive disjoint chunks of `out`,
/// for kernels doing substantial work per element (matmul rows, conv taps).
///
/// `out.len()` must be a multiple of `chunk`. Each chunk is written by exactly
/// one invocation, so the parallel and sequential paths produce identical bits.
pub fn for_each_chunk_mut<E, F>(out: &mut [E], chunk: usize, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync,
{
    for_each_chunk_mut_min(out, chunk, PAR_THRESHOLD, f)
}

/// Chunked dispatch for kernels doing only a few flops per element; going
/// parallel must clear a much higher bar to recoup the dispatch latency.
pub fn for_each_chunk_mut_cheap<E, F>(out: &mut [E], chunk: usize, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync,
{
    for_each_chunk_mut_min(out, chunk, PAR_THRESHOLD_ELEMENTWISE, f)
}

fn for_each_chunk_mut_min<E, F>(out: &mut [E], chunk: usize, min_elems: usize, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync,
{
    debug_assert!(chunk > 0 && out.len().is_multiple_of(chunk));
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() && out.len() >= min_elems && out.len() / chunk > 1 {
            // group tiny chunks so one task carries at least ~PAR_THRESHOLD
            // elements; per-chunk work is unchanged, only task granularity
            let per_block = PAR_THRESHOLD.div_ceil(chunk).max(1);
            out.par_chunks_mut(chunk * per_block)
                .enumerate()
                .for_each(|(b, block)| {
                    for (j, s) in block.chunks_mut(chunk).enumerate() {
                        f(b * per_block + j, s);
                    }
                });
            return;
        }
    }
    let _ = min_elems;
    for (i, s) in out.chunks_mut(chunk).enumerate() {
        f(i, s);
    }
}

/// Fill `out[i] = f(i)` elementwise.
pub fn fill_indexed<E, F>(out: &mut [E], f: F)
where
    E: Send,
    F: Fn(usize) -> E + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() && out.len() >= PAR_THRESHOLD_ELEMENTWISE {
            out.par_iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
            return;
        }
    }
    for (i, v) in out.iter_mut().enumerate() {
        *v = f(i);
    }
}

/// Map each index in `0..n` to a value, collecting in index order. Meant for
/// coarse work items (whole frames, samples, batch rows); small counts run
/// inline unless each item is known to be expensive.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() && n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Per-row statistics helper: like [`map_collect`] but stays sequential for
/// small row counts where the closure is cheap.
pub fn map_rows<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() && n >= 1024 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Configure the global thread pool from the `MYOTRACK_THREADS` environment
/// variable. No-op when unset, invalid, or when the pool already exists.
pub fn init_thread_pool_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("MYOTRACK_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_matches_sequential() {
        let mut a = vec![0u64; 16384];
        let mut b = vec![0u64; 16384];
        for_each_chunk_mut(&mut a, 64, |i, s| {
            for (j, v) in s.iter_mut().enumerate() {
                *v = (i * 1000 + j) as u64;
            }
        });
        set_sequential(true);
        for_each_chunk_mut(&mut b, 64, |i, s| {
            for (j, v) in s.iter_mut().enumerate() {
                *v = (i * 1000 + j) as u64;
            }
        });
        set_sequential(false);
        assert_eq!(a, b);
    }
}
