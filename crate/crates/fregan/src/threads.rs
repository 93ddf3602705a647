use std::sync::OnceLock;

use crate::error::{Error, Result};

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

/// Configures the worker pool used by the convolution kernels. Must be called
/// at most once per process, before any kernel runs. With n = 1 (or when never
/// called) everything stays on the calling thread.
pub fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    let pool = if n == 1 {
        None
    } else {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?,
        )
    };
    POOL.set(pool).map_err(|_| Error::Contract("thread pool already configured".into()))
}

/// Runs `f` once per `plane_len`-sized chunk of `data`. Each chunk is written
/// by exactly one invocation and the per-chunk work is identical in serial and
/// parallel mode, so results are bitwise independent of the thread count.
pub fn for_each_plane<T, F>(data: &mut [T], plane_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let parallel = POOL.get().and_then(|p| p.as_ref());
    match parallel {
        Some(pool) if data.len() > plane_len => pool.install(|| {
            use rayon::prelude::*;
            data.par_chunks_mut(plane_len).enumerate().for_each(|(i, chunk)| f(i, chunk));
        }),
        _ => {
            for (i, chunk) in data.chunks_mut(plane_len).enumerate() {
                f(i, chunk);
            }
        }
    }
}
