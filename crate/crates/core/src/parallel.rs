//! Row-level parallel helpers.
//!
//! Every kernel in this crate computes each output element with a fixed
//! sequential reduction. Parallelism only ever splits work across disjoint
//! output rows, so results are bit-identical with and without the
//! `parallel` feature.

#[cfg(feature = "parallel")]
pub(crate) fn for_each_row<T, F>(data: &mut [T], cols: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row<T, F>(data: &mut [T], cols: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    for (i, row) in data.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

/// Like [`for_each_row`] but hands each worker a scratch value built by
/// `init`. The scratch must not influence results, only avoid allocation.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row_scratch<T, R, I, F>(data: &mut [T], cols: usize, init: I, f: F)
where
    T: Send,
    I: Fn() -> R + Sync + Send,
    F: Fn(&mut R, usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    data.par_chunks_mut(cols)
        .enumerate()
        .for_each_init(&init, |scratch, (i, row)| f(scratch, i, row));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row_scratch<T, R, I, F>(data: &mut [T], cols: usize, init: I, f: F)
where
    T: Send,
    I: Fn() -> R + Sync + Send,
    F: Fn(&mut R, usize, &mut [T]) + Sync,
{
    let mut scratch = init();
    for (i, row) in data.chunks_mut(cols).enumerate() {
        f(&mut scratch, i, row);
    }
}
