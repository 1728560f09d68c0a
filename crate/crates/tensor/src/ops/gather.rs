use std::sync::Arc;

use rayon::prelude::*;

use crate::{Graph, Result, Scalar, Tensor, TensorError, Var};

/// Index value that produces an all-zero row in [`Graph::gather_rows`].
pub const ZERO_ROW: u32 = u32::MAX;

impl<T: Scalar> Graph<T> {
    /// Row gather: views `x` as rows of `row_len` contiguous elements and builds
    /// `out_row[i] = x_row[index[i]]`, or zeros where `index[i] == ZERO_ROW`.
    ///
    /// Window partitioning, cyclic shifts, padding, cropping and neighbourhood
    /// concatenation are all expressed as a gather with a precomputed index.
    pub fn gather_rows(
        &self,
        x: &Var<T>,
        row_len: usize,
        index: Arc<[u32]>,
        out_shape: Vec<usize>,
    ) -> Result<Var<T>> {
        if row_len == 0 || !x.value().numel().is_multiple_of(row_len) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row length {row_len} does not divide {:?}", x.shape()),
            ));
        }
        let in_rows = x.value().numel() / row_len;
        let out_numel: usize = out_shape.iter().product();
        if out_numel != index.len() * row_len {
            return Err(TensorError::shape(
                "gather_rows",
                format!("{} rows of {row_len}", index.len()),
                format!("{out_shape:?}"),
            ));
        }
        if let Some(&bad) = index
            .iter()
            .find(|&&i| i != ZERO_ROW && i as usize >= in_rows)
        {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {in_rows} rows"),
            ));
        }
        let xs = x.value().data();
        let mut out = vec![T::zero(); out_numel];
        out.par_chunks_mut(row_len)
            .zip(index.par_iter())
            .for_each(|(dst, &src)| {
                if src != ZERO_ROW {
                    let s = src as usize * row_len;
                    dst.copy_from_slice(&xs[s..s + row_len]);
                }
            });
        let value = Tensor::new(out_shape, out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.custom(&[x], value, move |g| {
            let gs = g.data();
            let mut dx = vec![T::zero(); in_rows * row_len];
            for (i, &src) in index.iter().enumerate() {
                if src != ZERO_ROW {
                    let d = &mut dx[src as usize * row_len..(src as usize + 1) * row_len];
                    for (a, &b) in d.iter_mut().zip(&gs[i * row_len..(i + 1) * row_len]) {
                        *a = *a + b;
                    }
                }
            }
            vec![Some(Tensor::new(in_shape, dx).expect("gather grad"))]
        }))
    }
}
