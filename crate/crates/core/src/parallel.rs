//! Ordered parallel map over path indices.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Evaluate `f(0..n)` and return the results in index order.
///
/// With `workers <= 1` the map runs on the calling thread. Otherwise a
/// dedicated pool of `workers` threads is used; the output order (and hence any
/// later summation) does not depend on the worker count.
pub fn map_paths<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if workers <= 1 || n < 2 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Domain(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let a = map_paths(1000, 1, |i| Ok(i * i)).unwrap();
        let b = map_paths(1000, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_error_propagates() {
        let r: Result<Vec<usize>> = map_paths(10, 2, |i| if i == 7 { Err(Error::Domain("x".into())) } else { Ok(i) });
        assert!(r.is_err());
    }
}
