//! Thin dispatch layer over rayon so the crate also builds without threads
//! (wasm targets). Work is always partitioned by particle index and results
//! land in preassigned slots; reductions happen serially afterwards, so the
//! numbers are identical with and without the `parallel` feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(i, row)` to each `width`-sized row of `data`.
pub fn for_each_row<F>(data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(width > 0 && data.len() % width == 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_exact_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_exact_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// Fill `out[i] = f(i)` for each slot.
pub fn fill_indexed<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_iter_mut().enumerate().for_each(|(i, slot)| *slot = f(i));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.iter_mut().enumerate().for_each(|(i, slot)| *slot = f(i));
    }
}

/// Apply `f(i, row)` to each row of `data` and store its value in `out[i]`.
pub fn for_each_row_with<T, F>(data: &mut [f64], width: usize, out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut [f64]) -> T + Sync + Send,
{
    assert!(width > 0 && data.len() == out.len() * width);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_exact_mut(width)
            .zip_eq(out.par_iter_mut())
            .enumerate()
            .for_each(|(i, (row, slot))| *slot = f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_exact_mut(width)
            .zip(out.iter_mut())
            .enumerate()
            .for_each(|(i, (row, slot))| *slot = f(i, row));
    }
}
