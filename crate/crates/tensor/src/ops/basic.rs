use rayon::prelude::*;

use super::{lane_reduce, rows_per_chunk};
use crate::gemm::{gemm, MatRef};
use crate::{Graph, Result, Scalar, Tensor, TensorError, Var};

fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        let value = a.value().zip_map(b.value(), |x, y| x + y)?;
        Ok(self.custom(&[a, b], value, |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn scale(&self, a: &Var<T>, factor: T) -> Var<T> {
        let value = a.value().map(|x| x * factor);
        self.custom(&[a], value, move |g| vec![Some(g.map(|v| v * factor))])
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        let value = a.value().map(|x| if x > T::zero() { x } else { T::zero() });
        let input = a.value().clone();
        let need = self.needs_grad(&[a]);
        self.custom(&[a], value, move |g| {
            debug_assert!(need);
            let grad = g
                .zip_map(&input, |gv, x| if x > T::zero() { gv } else { T::zero() })
                .expect("relu grad shape");
            vec![Some(grad)]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let value = a
            .value()
            .map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        let input = a.value().clone();
        self.custom(&[a], value, move |g| {
            let grad = g
                .zip_map(&input, |gv, x| {
                    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
                    gv * (cdf + x * pdf)
                })
                .expect("gelu grad shape");
            vec![Some(grad)]
        })
    }

    /// Affine map over the innermost axis: `y = x W^T + b`, `W: [out, in]`.
    pub fn linear(&self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let &[out_f, in_f] = weight.shape() else {
            return Err(TensorError::shape(
                "linear",
                "rank-2 weight",
                format!("{:?}", weight.shape()),
            ));
        };
        if x.value().last_dim() != in_f {
            return Err(TensorError::shape(
                "linear",
                format!("{in_f} input features"),
                format!("{:?}", x.shape()),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [out_f] {
                return Err(TensorError::shape(
                    "linear bias",
                    format!("[{out_f}]"),
                    format!("{:?}", b.shape()),
                ));
            }
        }
        let rows = x.value().numel() / in_f;
        let xs = x.value().data();
        let ws = weight.value().data();
        let chunk = rows_per_chunk::<T>(in_f + out_f, 1 << 20);
        let mut out = vec![T::zero(); rows * out_f];
        out.par_chunks_mut(chunk * out_f)
            .enumerate()
            .for_each(|(ci, dst)| {
                let r0 = ci * chunk;
                let n = dst.len() / out_f;
                gemm(
                    MatRef::rows(&xs[r0 * in_f..(r0 + n) * in_f], n, in_f),
                    MatRef::transposed(ws, in_f, out_f),
                    T::zero(),
                    dst,
                );
                if let Some(b) = bias {
                    let bs = b.value().data();
                    for row in dst.chunks_mut(out_f) {
                        for (v, &bv) in row.iter_mut().zip(bs) {
                            *v = *v + bv;
                        }
                    }
                }
            });
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = out_f;
        let value = Tensor::new(shape, out)?;

        let inputs: Vec<&Var<T>> = match bias {
            Some(b) => vec![x, weight, b],
            None => vec![x, weight],
        };
        let x_val = x.value().clone();
        let w_val = weight.value().clone();
        let (need_x, need_w) = (x.requires_grad(), weight.requires_grad());
        let has_bias = bias.is_some();
        let need_b = bias.is_some_and(|b| b.requires_grad());
        Ok(self.custom(&inputs, value, move |g| {
            let gs = g.data();
            let dx = need_x.then(|| {
                let ws = w_val.data();
                let mut dx = vec![T::zero(); rows * in_f];
                dx.par_chunks_mut(chunk * in_f)
                    .enumerate()
                    .for_each(|(ci, dst)| {
                        let r0 = ci * chunk;
                        let n = dst.len() / in_f;
                        gemm(
                            MatRef::rows(&gs[r0 * out_f..(r0 + n) * out_f], n, out_f),
                            MatRef::rows(ws, out_f, in_f),
                            T::zero(),
                            dst,
                        );
                    });
                Tensor::new(x_val.shape().to_vec(), dx).expect("linear dx")
            });
            let dw = need_w.then(|| {
                let xs = x_val.data();
                let dw = lane_reduce(rows, out_f * in_f, |range, acc| {
                    let n = range.len();
                    gemm(
                        MatRef::transposed(&gs[range.start * out_f..range.end * out_f], out_f, n),
                        MatRef::rows(&xs[range.start * in_f..range.end * in_f], n, in_f),
                        T::one(),
                        acc,
                    );
                });
                Tensor::new(vec![out_f, in_f], dw).expect("linear dw")
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(need_b.then(|| {
                    let db = lane_reduce(rows, out_f, |range, acc| {
                        for row in gs[range.start * out_f..range.end * out_f].chunks(out_f) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                    });
                    Tensor::new(vec![out_f], db).expect("linear db")
                }));
            }
            grads
        }))
    }

    /// Concatenation along the innermost axis.
    pub fn concat_last(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_last", "no inputs"))?;
        let outer = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            if &p.shape()[..p.shape().len() - 1] != outer {
                return Err(TensorError::shape(
                    "concat_last",
                    format!("{outer:?} + [c]"),
                    format!("{:?}", p.shape()),
                ));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.value().last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = outer.iter().product();
        let mut out = vec![T::zero(); rows * total];
        out.par_chunks_mut(total).enumerate().for_each(|(r, dst)| {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                dst[off..off + w].copy_from_slice(&p.value().data()[r * w..(r + 1) * w]);
                off += w;
            }
        });
        let mut shape = outer.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(self.custom(parts, value, move |g| {
            let gs = g.data();
            let mut off = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for ((&w, shape), need) in widths.iter().zip(&shapes).zip(&needs) {
                if *need {
                    let mut d = vec![T::zero(); rows * w];
                    d.par_chunks_mut(w).enumerate().for_each(|(r, dst)| {
                        dst.copy_from_slice(&gs[r * total + off..r * total + off + w]);
                    });
                    grads.push(Some(Tensor::new(shape.clone(), d).expect("concat grad")));
                } else {
                    grads.push(None);
                }
                off += w;
            }
            grads
        }))
    }

    pub fn reshape(&self, a: &Var<T>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let value = a.value().reshape(shape)?;
        let original = a.shape().to_vec();
        Ok(self.custom(&[a], value, move |g| {
            vec![Some(g.reshape(original).expect("reshape grad"))]
        }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        let value = Tensor::scalar(a.value().sum());
        let shape = a.shape().to_vec();
        self.custom(&[a], value, move |g| {
            vec![Some(Tensor::full(shape, g.data()[0]))]
        })
    }

    /// `sum(a * direction)` for a constant `direction`; a random linear probe of `a`.
    pub fn dot_const(&self, a: &Var<T>, direction: &Tensor<T>) -> Result<Var<T>> {
        if a.shape() != direction.shape() {
            return Err(TensorError::shape(
                "dot_const",
                format!("{:?}", a.shape()),
                format!("{:?}", direction.shape()),
            ));
        }
        let value = Tensor::scalar(
            a.value()
                .data()
                .iter()
                .zip(direction.data())
                .map(|(&x, &d)| x * d)
                .sum(),
        );
        let dir = direction.clone();
        Ok(self.custom(&[a], value, move |g| {
            let s = g.data()[0];
            vec![Some(dir.map(|d| d * s))]
        }))
    }
}
