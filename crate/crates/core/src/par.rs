//! Data-parallel helpers for the reference interpreter: rayon with the
//! `parallel` feature, plain loops without. Rank threads must not call
//! these, since they would block while holding no pool worker.

/// `(0..n).map(f)`, possibly evaluated concurrently. Order is preserved.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fills consecutive `width`-sized rows of `out` with `f(row_index, row)`.
pub fn for_each_row<F>(out: &mut [f32], width: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(width).enumerate().for_each(|(r, row)| f(r, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(width).enumerate().for_each(|(r, row)| f(r, row));
    }
}
