//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! a rayon pool, otherwise it runs sequentially in order. Results are
//! returned in input order either way, so outputs never depend on the
//! worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

pub fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Sequential reference implementation, always available (benches compare
/// against it).
pub fn seq_map_range<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
    (0..n).map(f).collect()
}

/// Runs `f` inside a pool of `workers` threads (`None` or 0 = default pool).
pub fn with_workers<R: Send, F: FnOnce() -> R + Send>(workers: Option<usize>, f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        match workers {
            Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(f),
                Err(e) => {
                    log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                    f()
                }
            },
            _ => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        f()
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
