//! Data-parallel helpers with a sequential fallback.
//!
//! All batch-level loops in the crate go through [`map_indexed`]: with the
//! `parallel` feature (default) the closure runs on the rayon pool, without
//! it the same closure runs sequentially. Results are collected in index
//! order either way, and every reduction in the crate folds those ordered
//! results sequentially, so enabling or disabling the feature does not
//! change a single bit of any output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Sequential version of [`map_indexed`], kept available regardless of
/// features so benchmarks can compare both paths in one build.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let a = map_indexed(257, |i| (i as f64).sqrt().sin());
        let b = map_indexed_seq(257, |i| (i as f64).sqrt().sin());
        assert_eq!(a, b);
    }
}
