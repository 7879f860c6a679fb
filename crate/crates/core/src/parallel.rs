//! Deterministic sharding over scoped threads.
//!
//! Work is split into contiguous shards in input order and results come back
//! indexed by shard, so any reduction done by the caller in ascending shard
//! order is independent of thread scheduling.

use std::num::NonZeroUsize;

/// Number of worker threads to use. `0` is treated as `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Workers(NonZeroUsize);

impl Workers {
    pub const ONE: Workers = Workers(NonZeroUsize::MIN);

    pub fn new(n: usize) -> Self {
        Workers(NonZeroUsize::new(n).unwrap_or(NonZeroUsize::MIN))
    }

    pub fn get(self) -> usize {
        self.0.get()
    }
}

impl Default for Workers {
    fn default() -> Self {
        Workers::ONE
    }
}

/// Contiguous shard ranges covering `0..len`, at most `workers` of them.
pub fn shard_ranges(len: usize, workers: Workers) -> Vec<std::ops::Range<usize>> {
    let shards = workers.get().min(len.max(1));
    let base = len / shards;
    let extra = len % shards;
    let mut out = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let size = base + usize::from(s < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Runs `f` over each shard of `items` and returns the per-shard results in
/// ascending shard order. With one worker this runs inline.
pub fn map_shards<T, R, F>(items: &[T], workers: Workers, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync,
{
    let ranges = shard_ranges(items.len(), workers);
    if ranges.len() == 1 {
        return vec![f(0, items)];
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, r)| {
                let f = &f;
                let chunk = &items[r];
                scope.spawn(move || f(i, chunk))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}
