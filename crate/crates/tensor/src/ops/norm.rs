use rayon::prelude::*;

use crate::{Graph, Result, Scalar, Tensor, TensorError, Var};

fn check_affine<T: Scalar>(
    op: &'static str,
    c: usize,
    gamma: &Var<T>,
    beta: &Var<T>,
) -> Result<()> {
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(TensorError::shape(
                op,
                format!("[{c}]"),
                format!("{:?}", p.shape()),
            ));
        }
    }
    Ok(())
}

/// Normalises `groups` independent sets of `count` samples, each sample a row
/// of `c` channels laid out as `data[group][sample][channel]`. Statistics are
/// per (group, channel). Returns `(xhat, inv_std)`.
fn normalize_columns<T: Scalar>(
    data: &[T],
    groups: usize,
    count: usize,
    c: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); data.len()];
    let mut inv_std = vec![T::zero(); groups * c];
    xhat.par_chunks_mut(count * c)
        .zip(inv_std.par_chunks_mut(c))
        .enumerate()
        .for_each(|(gi, (dst, istd))| {
            let src = &data[gi * count * c..(gi + 1) * count * c];
            let mut mean = vec![0f64; c];
            for row in src.chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0f64; c];
            for row in src.chunks(c) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v.as_f64() - m;
                    *s += d * d;
                }
            }
            let inv: Vec<f64> = var
                .iter()
                .map(|&s| 1.0 / (s / count as f64 + eps).sqrt())
                .collect();
            for (drow, srow) in dst.chunks_mut(c).zip(src.chunks(c)) {
                for ch in 0..c {
                    drow[ch] = T::of((srow[ch].as_f64() - mean[ch]) * inv[ch]);
                }
            }
            for (o, &v) in istd.iter_mut().zip(&inv) {
                *o = T::of(v);
            }
        });
    (xhat, inv_std)
}

/// Backward of [`normalize_columns`] followed by the affine `gamma * xhat + beta`.
/// Returns `(dx, dgamma, dbeta)`.
fn normalize_columns_backward<T: Scalar>(
    grad: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    groups: usize,
    count: usize,
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); grad.len()];
    let mut dgamma = vec![0f64; c];
    let mut dbeta = vec![0f64; c];
    for gi in 0..groups {
        let range = gi * count * c..(gi + 1) * count * c;
        let (g, xh) = (&grad[range.clone()], &xhat[range.clone()]);
        let mut sum_dy = vec![0f64; c];
        let mut sum_dy_xhat = vec![0f64; c];
        for (grow, xrow) in g.chunks(c).zip(xh.chunks(c)) {
            for ch in 0..c {
                let dy = grow[ch].as_f64();
                sum_dy[ch] += dy;
                sum_dy_xhat[ch] += dy * xrow[ch].as_f64();
            }
        }
        for ch in 0..c {
            dbeta[ch] += sum_dy[ch];
            dgamma[ch] += sum_dy_xhat[ch];
        }
        let n = count as f64;
        let coef: Vec<(f64, f64, f64)> = (0..c)
            .map(|ch| {
                let gm = gamma[ch].as_f64();
                let istd = inv_std[gi * c + ch].as_f64();
                (gm * istd, sum_dy[ch] / n, sum_dy_xhat[ch] / n)
            })
            .collect();
        dx[range]
            .par_chunks_mut(c)
            .zip(g.par_chunks(c).zip(xh.par_chunks(c)))
            .for_each(|(drow, (grow, xrow))| {
                for ch in 0..c {
                    let (scale, mdy, mdyx) = coef[ch];
                    drow[ch] = T::of(scale * (grow[ch].as_f64() - mdy - xrow[ch].as_f64() * mdyx));
                }
            });
    }
    (
        dx,
        dgamma.into_iter().map(T::of).collect(),
        dbeta.into_iter().map(T::of).collect(),
    )
}

impl<T: Scalar> Graph<T> {
    fn affine_norm(
        &self,
        op: &'static str,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        groups: usize,
        count: usize,
        eps: f64,
    ) -> Result<Var<T>> {
        let c = x.value().last_dim();
        check_affine(op, c, gamma, beta)?;
        let (xhat, inv_std) = normalize_columns(x.value().data(), groups, count, c, eps);
        let gs = gamma.value().data();
        let bs = beta.value().data();
        let mut out = xhat.clone();
        out.par_chunks_mut(c).for_each(|row| {
            for ch in 0..c {
                row[ch] = row[ch] * gs[ch] + bs[ch];
            }
        });
        let value = Tensor::new(x.shape().to_vec(), out)?;
        if !self.needs_grad(&[x, gamma, beta]) {
            return Ok(self.constant(value));
        }
        let gamma_val = gamma.value().clone();
        let shape = x.shape().to_vec();
        Ok(self.custom(&[x, gamma, beta], value, move |g| {
            let (dx, dg, db) = normalize_columns_backward(
                g.data(),
                &xhat,
                &inv_std,
                gamma_val.data(),
                groups,
                count,
                c,
            );
            vec![
                Some(Tensor::new(shape, dx).expect("norm dx")),
                Some(Tensor::new(vec![c], dg).expect("norm dgamma")),
                Some(Tensor::new(vec![c], db).expect("norm dbeta")),
            ]
        }))
    }

    /// Per-sample, per-channel normalisation over all spatial positions of a
    /// channels-last tensor `[batch, ..., channels]`, with a learned affine.
    pub fn instance_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(TensorError::shape(
                "instance_norm",
                "rank >= 2",
                format!("{shape:?}"),
            ));
        }
        let b = shape[0];
        let c = x.value().last_dim();
        let count = x.value().numel() / (b * c);
        self.affine_norm("instance_norm", x, gamma, beta, b, count, eps)
    }

    /// Normalisation over the innermost axis of every row, with a learned affine.
    pub fn layer_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let c = x.value().last_dim();
        let rows = x.value().numel() / c;
        // Treat every row as its own group of one sample whose channels are
        // the statistics axis: transpose-free by reshaping rows to [c, 1].
        let reshaped = self.reshape(x, vec![rows, c, 1])?;
        let ones = Tensor::ones(vec![1]);
        let zeros = Tensor::zeros(vec![1]);
        let unit_gamma = self.constant(ones);
        let unit_beta = self.constant(zeros);
        let normed = self.affine_norm(
            "layer_norm",
            &reshaped,
            &unit_gamma,
            &unit_beta,
            rows,
            c,
            eps,
        )?;
        let normed = self.reshape(&normed, x.shape().to_vec())?;
        self.scale_shift_last(&normed, gamma, beta)
    }

    /// `x * gamma + beta` broadcast over the innermost axis.
    pub fn scale_shift_last(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
        let c = x.value().last_dim();
        check_affine("scale_shift_last", c, gamma, beta)?;
        let gs = gamma.value().data();
        let bs = beta.value().data();
        let mut out = x.value().data().to_vec();
        out.par_chunks_mut(c).for_each(|row| {
            for ch in 0..c {
                row[ch] = row[ch] * gs[ch] + bs[ch];
            }
        });
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let x_val = x.value().clone();
        let g_val = gamma.value().clone();
        Ok(self.custom(&[x, gamma, beta], value, move |g| {
            let gd = g.data();
            let gm = g_val.data();
            let mut dx = gd.to_vec();
            dx.par_chunks_mut(c).for_each(|row| {
                for ch in 0..c {
                    row[ch] = row[ch] * gm[ch];
                }
            });
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (grow, xrow) in gd.chunks(c).zip(x_val.data().chunks(c)) {
                for ch in 0..c {
                    dg[ch] = dg[ch] + grow[ch] * xrow[ch];
                    db[ch] = db[ch] + grow[ch];
                }
            }
            vec![
                Some(Tensor::new(x_val.shape().to_vec(), dx).expect("scale dx")),
                Some(Tensor::new(vec![c], dg).expect("scale dgamma")),
                Some(Tensor::new(vec![c], db).expect("scale dbeta")),
            ]
        }))
    }
}
