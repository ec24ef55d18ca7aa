//! Ordered fan-out helper. The parallel path partitions work by item and
//! never reorders results, so outputs are bit-identical to the sequential
//! path; the `parallel` feature swaps the execution strategy only.

/// Below this many items the rayon dispatch overhead dominates.
pub const PAR_CUTOFF: usize = 8;

#[cfg(feature = "parallel")]
pub fn map_ordered<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    if items.len() < PAR_CUTOFF {
        items.into_iter().map(f).collect()
    } else {
        items.into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Sequential reference path, kept compiled under every feature set so the
/// bench suite can compare strategies directly.
pub fn map_ordered_seq<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Caps the worker pool at `n` threads. First call wins for the whole
/// process; 0 leaves the default. No-op without the `parallel` feature.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let items: Vec<u64> = (0..100).collect();
        let out = map_ordered(items.clone(), |x| x * x + 1);
        let exp = map_ordered_seq(items, |x| x * x + 1);
        assert_eq!(out, exp);
    }
}
