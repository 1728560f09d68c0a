//! Differentiable ops recorded on a [`Graph`](crate::Graph).

pub mod basic;
pub mod conv;
pub mod gather;
pub mod norm;

use rayon::prelude::*;

use crate::Scalar;

/// Fixed number of partial accumulators used for reductions over positions.
/// Keeping this independent of the thread count makes reductions bit-stable
/// whatever the rayon pool size.
pub(crate) const REDUCTION_LANES: usize = 8;

/// Splits `0..n` into `REDUCTION_LANES` contiguous ranges, evaluates `f` on
/// each in parallel and sums the resulting buffers in lane order.
pub(crate) fn lane_reduce<T, F>(n: usize, len: usize, f: F) -> Vec<T>
where
    T: Scalar,
    F: Fn(std::ops::Range<usize>, &mut [T]) + Sync,
{
    let per_lane = n.div_ceil(REDUCTION_LANES).max(1);
    let partials: Vec<Vec<T>> = (0..REDUCTION_LANES)
        .into_par_iter()
        .map(|lane| {
            let mut acc = vec![T::zero(); len];
            let start = (lane * per_lane).min(n);
            let end = ((lane + 1) * per_lane).min(n);
            if start < end {
                f(start..end, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![T::zero(); len];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t = *t + p;
        }
    }
    total
}

/// Rows per parallel work item so that a scratch row block stays near `bytes`.
pub(crate) fn rows_per_chunk<T>(row_len: usize, bytes: usize) -> usize {
    (bytes / (row_len.max(1) * std::mem::size_of::<T>())).clamp(16, 4096)
}
