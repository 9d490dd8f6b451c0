//! Data-parallel map helpers.
//!
//! With the `parallel` feature (default) the indexed maps fan out over
//! rayon; without it they fall back to a plain loop. Results are collected
//! in input order either way, so reductions downstream see an identical
//! sequence and outputs stay bitwise reproducible.

/// Maps `f` over the items, in parallel when enabled.
#[cfg(feature = "parallel")]
pub fn map_indexed<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(usize, &T) -> R + Sync + Send,
) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, R>(items: &[T], f: impl Fn(usize, &T) -> R) -> Vec<R> {
    map_indexed_seq(items, f)
}

/// Sequential variant, kept callable regardless of features for the bench
/// suite and for `--deterministic` single-worker runs.
pub fn map_indexed_seq<T, R>(items: &[T], f: impl Fn(usize, &T) -> R) -> Vec<R> {
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Like [`map_indexed`] but over an index range without materialized items.
#[cfg(feature = "parallel")]
pub fn map_range<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R>(n: usize, f: impl Fn(usize) -> R) -> Vec<R> {
    map_range_seq(n, f)
}

pub fn map_range_seq<R>(n: usize, f: impl Fn(usize) -> R) -> Vec<R> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let items: Vec<u64> = (0..257).collect();
        let f = |i: usize, t: &u64| (i as u64) * 31 + t * 7;
        assert_eq!(map_indexed(&items, f), map_indexed_seq(&items, f));
    }
}
