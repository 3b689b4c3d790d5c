//! Batch execution strategy.
//!
//! Batch operations (composite assembly, metric evaluation over frame pairs)
//! funnel through [`try_map_range`]. With the default `parallel` feature the
//! kernel runs on the rayon pool; without it, or when the caller reports the
//! kernel is not safe to share, items run sequentially on the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Error;

pub(crate) fn try_map_range<U, F>(
    n: usize,
    allow_parallel: bool,
    kernel: F,
) -> Result<Vec<U>, Error>
where
    U: Send,
    F: Fn(usize) -> Result<U, Error> + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if allow_parallel {
        return (0..n).into_par_iter().map(kernel).collect();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = allow_parallel;
    (0..n).map(kernel).collect()
}
