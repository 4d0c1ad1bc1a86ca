//! Data-parallel map helpers.
//!
//! Every parallel loop in the crate goes through [`map_range`], which runs on
//! rayon when the `parallel` feature is enabled and falls back to a plain
//! sequential loop otherwise. Results are always returned in index order, so
//! output never depends on scheduling.

/// Execution strategy for a data-parallel loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Uses rayon when compiled with `parallel`; sequential otherwise.
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        Exec::Parallel => parallel_map(n, f),
    }
}

/// Like [`map_range`] but on a dedicated pool of `threads` workers, for
/// coarse independent jobs such as sweep cells.
pub fn map_range_pool<R, F>(threads: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    pooled_map(threads, n, f)
}

#[cfg(feature = "parallel")]
fn pooled_map<R, F>(threads: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("could not build a {threads}-thread pool ({e}); running sequentially");
            (0..n).map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn pooled_map<R, F>(_threads: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, collecting results in order.
pub fn map_slice<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    map_range(exec, items.len(), |i| f(i, &items[i]))
}

/// Runs `f` on each element with mutable access, collecting results in order.
pub fn map_mut<T, R, F>(exec: Exec, items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    match exec {
        Exec::Sequential => items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect(),
        Exec::Parallel => parallel_map_mut(items, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(feature = "parallel")]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Pairwise (fixed-tree) summation. The tree shape depends only on the length,
/// so the result is bit-identical for a given input regardless of how the
/// caller produced it.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let a = map_range(Exec::Sequential, 100, |i| i * i);
        let b = map_range(Exec::Parallel, 100, |i| i * i);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
