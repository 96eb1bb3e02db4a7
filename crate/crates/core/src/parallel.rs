//! Data-parallel helpers over independent work items (batch samples, seeds,
//! finite-difference probes).
//!
//! With the `parallel` feature the work is spread over the rayon pool; without
//! it every helper runs a plain sequential loop. Results are always returned in
//! item order and reductions happen sequentially over fixed-size chunks, so the
//! output is bit-identical regardless of thread count or feature selection.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Fixed chunk width for chunked reductions. Must not depend on thread count.
pub const REDUCE_CHUNK: usize = 8;

/// Runtime switch, mostly for benchmarks. Has no effect without the
/// `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f` to each chunk of `items` of width `chunk`, passing the chunk's
/// starting index. Used for in-place per-sample transforms.
pub fn for_each_chunk_mut<T, F>(items: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        items
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(c, xs)| f(c * chunk, xs));
        return;
    }
    items
        .chunks_mut(chunk)
        .enumerate()
        .for_each(|(c, xs)| f(c * chunk, xs));
}

/// Per-item map with a per-chunk accumulator. Items `[k*REDUCE_CHUNK, ..)`
/// share one accumulator built by `make`; accumulators come back in chunk
/// order so the caller can merge them deterministically.
pub fn map_with_accumulators<T, A, M, F>(n: usize, make: M, f: F) -> (Vec<T>, Vec<A>)
where
    T: Send,
    A: Send,
    M: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) -> T + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let run_chunk = |c: usize| {
        let mut acc = make();
        let lo = c * REDUCE_CHUNK;
        let hi = (lo + REDUCE_CHUNK).min(n);
        let outs: Vec<T> = (lo..hi).map(|i| f(&mut acc, i)).collect();
        (outs, acc)
    };
    let per_chunk: Vec<(Vec<T>, A)> = map(chunks, run_chunk);
    let mut outs = Vec::with_capacity(n);
    let mut accs = Vec::with_capacity(chunks);
    for (o, a) in per_chunk {
        outs.extend(o);
        accs.push(a);
    }
    (outs, accs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn accumulators_are_chunked_by_fixed_width() {
        let (outs, accs) = map_with_accumulators(
            19,
            || 0usize,
            |acc, i| {
                *acc += i;
                i
            },
        );
        assert_eq!(outs.len(), 19);
        assert_eq!(accs.len(), 3);
        assert_eq!(accs[0], (0..8).sum::<usize>());
        assert_eq!(accs[2], (16..19).sum::<usize>());
    }

    #[test]
    fn chunk_mut_sees_offsets() {
        let mut v = vec![0usize; 21];
        for_each_chunk_mut(&mut v, 4, |start, xs| {
            for (k, x) in xs.iter_mut().enumerate() {
                *x = start + k;
            }
        });
        assert_eq!(v, (0..21).collect::<Vec<_>>());
    }
}
