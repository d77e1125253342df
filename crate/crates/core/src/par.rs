//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) the loops below run on the
//! rayon global pool; without it they fall back to plain iterators. The
//! [`sequential`] module is always available so both paths can be compared
//! side by side in benchmarks and tests.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, preserving index order in the output.
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
        sequential::map_indexed(n, f)
    }
}

/// Applies `f` to each fixed-size chunk of `data` together with the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        sequential::for_each_chunk_mut(data, chunk, f)
    }
}

/// Sum of `f(i)` over `0..n`, reduced in a fixed tree order so the result
/// does not depend on thread scheduling.
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    // Block partials are computed independently, then summed in order.
    const BLOCK: usize = 256;
    let blocks = n.div_ceil(BLOCK);
    let partials = map_indexed(blocks, |b| {
        let end = ((b + 1) * BLOCK).min(n);
        (b * BLOCK..end).map(&f).sum::<f64>()
    });
    partials.into_iter().sum()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

pub mod sequential {
    pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
    where
        F: Fn(usize) -> T,
    {
        (0..n).map(f).collect()
    }

    pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [T]),
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    pub fn sum_indexed<F>(n: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64,
    {
        const BLOCK: usize = 256;
        let blocks = n.div_ceil(BLOCK);
        (0..blocks)
            .map(|b| {
                let end = ((b + 1) * BLOCK).min(n);
                (b * BLOCK..end).map(&f).sum::<f64>()
            })
            .sum()
    }
}
