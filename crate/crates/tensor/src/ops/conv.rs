//! 3D convolutions on channels-last volumes.
//!
//! Forward and weight-gradient passes use im2col rows of
//! `[kx][ky][kz][cin]` against the weight viewed as a `(k^3 cin) x cout`
//! matrix. At stride 1 the input gradient is computed in gather form, one
//! input position per row, so rows never alias and work splits across
//! threads. Strided convolutions scatter instead, in a fixed order.

use rayon::prelude::*;

use super::{lane_reduce, rows_per_chunk};
use crate::gemm::{gemm, MatRef};
use crate::{Graph, Result, Scalar, Tensor, TensorError, Var};

const SCRATCH_BYTES: usize = 4 << 20;

/// Geometry of a cubic-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output(&self) -> [usize; 3] {
        self.input
            .map(|n| (n + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    fn kk(&self) -> usize {
        self.kernel.pow(3)
    }

    fn col_len(&self) -> usize {
        self.kk() * self.in_channels
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(TensorError::invalid(
                "conv3d",
                "kernel and stride must be positive",
            ));
        }
        if self
            .input
            .iter()
            .any(|&n| n + 2 * self.padding < self.kernel)
        {
            return Err(TensorError::invalid(
                "conv3d",
                format!(
                    "input {:?} smaller than kernel {} with padding {}",
                    self.input, self.kernel, self.padding
                ),
            ));
        }
        Ok(())
    }
}

/// Fills `col` with im2col rows for flattened output positions `first..first+rows`.
fn im2col<T: Scalar>(x: &[T], geo: &ConvGeometry, first: usize, col: &mut [T]) {
    let [ix_n, iy_n, iz_n] = geo.input;
    let [ox_n, oy_n, oz_n] = geo.output();
    let (k, cin, s, p) = (
        geo.kernel,
        geo.in_channels,
        geo.stride,
        geo.padding as isize,
    );
    let per_batch = ox_n * oy_n * oz_n;
    let row_len = geo.col_len();
    for (r, row) in col.chunks_mut(row_len).enumerate() {
        let pos = first + r;
        let b = pos / per_batch;
        let rem = pos % per_batch;
        let (ox, oy, oz) = (rem / (oy_n * oz_n), (rem / oz_n) % oy_n, rem % oz_n);
        let base = b * ix_n * iy_n * iz_n;
        let mut off = 0;
        for kx in 0..k {
            let ix = (ox * s + kx) as isize - p;
            if ix < 0 || ix >= ix_n as isize {
                row[off..off + k * k * cin].fill(T::zero());
                off += k * k * cin;
                continue;
            }
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p;
                if iy < 0 || iy >= iy_n as isize {
                    row[off..off + k * cin].fill(T::zero());
                    off += k * cin;
                    continue;
                }
                let iz0 = (oz * s) as isize - p;
                let line = (base + ix as usize * iy_n * iz_n + iy as usize * iz_n) * cin;
                if s == 1 && iz0 >= 0 && iz0 + k as isize <= iz_n as isize {
                    // The whole kz run is one contiguous slice of the input.
                    let src = line + iz0 as usize * cin;
                    row[off..off + k * cin].copy_from_slice(&x[src..src + k * cin]);
                    off += k * cin;
                    continue;
                }
                for kz in 0..k {
                    let iz = iz0 + kz as isize;
                    if iz < 0 || iz >= iz_n as isize {
                        row[off..off + cin].fill(T::zero());
                    } else {
                        let src = line + iz as usize * cin;
                        row[off..off + cin].copy_from_slice(&x[src..src + cin]);
                    }
                    off += cin;
                }
            }
        }
    }
}

/// Forward convolution; returns the channels-last output buffer.
pub fn conv3d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    geo: &ConvGeometry,
) -> Vec<T> {
    let out_pos = geo.batch * geo.output().iter().product::<usize>();
    let cout = geo.out_channels;
    let col_len = geo.col_len();
    let chunk = rows_per_chunk::<T>(col_len, SCRATCH_BYTES);
    let mut out = vec![T::zero(); out_pos * cout];
    out.par_chunks_mut(chunk * cout)
        .enumerate()
        .for_each_init(Vec::new, |col, (ci, dst)| {
            let rows = dst.len() / cout;
            // Scratch is reused across chunks; im2col overwrites every element.
            col.resize(rows * col_len, T::zero());
            im2col(x, geo, ci * chunk, col);
            gemm(
                MatRef::rows(col, rows, col_len),
                MatRef::transposed(w, col_len, cout),
                T::zero(),
                dst,
            );
            if let Some(b) = bias {
                for row in dst.chunks_mut(cout) {
                    for (v, &bv) in row.iter_mut().zip(b) {
                        *v = *v + bv;
                    }
                }
            }
        });
    out
}

/// Input gradient for strided convolutions: `grad * w` per output row,
/// scattered back through the im2col layout in row order.
fn conv3d_backward_input_scatter<T: Scalar>(grad: &[T], w: &[T], geo: &ConvGeometry) -> Vec<T> {
    let [ix_n, iy_n, iz_n] = geo.input;
    let [ox_n, oy_n, oz_n] = geo.output();
    let (k, cin, cout, s, p) = (
        geo.kernel,
        geo.in_channels,
        geo.out_channels,
        geo.stride,
        geo.padding as isize,
    );
    let col_len = geo.col_len();
    let per_batch = ox_n * oy_n * oz_n;
    let out_pos = geo.batch * per_batch;
    let chunk = rows_per_chunk::<T>(col_len, SCRATCH_BYTES);
    let mut dx = vec![T::zero(); geo.batch * ix_n * iy_n * iz_n * cin];
    let mut dcol = vec![T::zero(); chunk * col_len];
    let mut first = 0;
    while first < out_pos {
        let rows = chunk.min(out_pos - first);
        let dcol = &mut dcol[..rows * col_len];
        gemm(
            MatRef::rows(&grad[first * cout..(first + rows) * cout], rows, cout),
            MatRef::rows(w, cout, col_len),
            T::zero(),
            dcol,
        );
        for (r, row) in dcol.chunks(col_len).enumerate() {
            let pos = first + r;
            let b = pos / per_batch;
            let rem = pos % per_batch;
            let (ox, oy, oz) = (rem / (oy_n * oz_n), (rem / oz_n) % oy_n, rem % oz_n);
            let base = b * ix_n * iy_n * iz_n;
            for kx in 0..k {
                let ix = (ox * s + kx) as isize - p;
                if ix < 0 || ix >= ix_n as isize {
                    continue;
                }
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= iy_n as isize {
                        continue;
                    }
                    for kz in 0..k {
                        let iz = (oz * s + kz) as isize - p;
                        if iz < 0 || iz >= iz_n as isize {
                            continue;
                        }
                        let dst =
                            (base + (ix as usize * iy_n + iy as usize) * iz_n + iz as usize) * cin;
                        let off = ((kx * k + ky) * k + kz) * cin;
                        for (d, &v) in dx[dst..dst + cin].iter_mut().zip(&row[off..off + cin]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
        first += rows;
    }
    dx
}

/// Input gradient: gather form at stride 1, scatter form otherwise.
pub fn conv3d_backward_input<T: Scalar>(grad: &[T], w: &[T], geo: &ConvGeometry) -> Vec<T> {
    if geo.stride > 1 {
        return conv3d_backward_input_scatter(grad, w, geo);
    }
    let [ix_n, iy_n, iz_n] = geo.input;
    let [ox_n, oy_n, oz_n] = geo.output();
    let (k, cin, cout, s, p) = (
        geo.kernel,
        geo.in_channels,
        geo.out_channels,
        geo.stride,
        geo.padding,
    );
    let kk = geo.kk();
    // Weight regrouped as [k^3][cout][cin] so a gathered row of output
    // gradients multiplies it as a dense (k^3 cout) x cin matrix.
    let mut w2 = vec![T::zero(); kk * cout * cin];
    for co in 0..cout {
        for ki in 0..kk {
            let src = &w[(co * kk + ki) * cin..(co * kk + ki + 1) * cin];
            w2[(ki * cout + co) * cin..(ki * cout + co + 1) * cin].copy_from_slice(src);
        }
    }
    let in_pos = geo.batch * ix_n * iy_n * iz_n;
    let per_batch_in = ix_n * iy_n * iz_n;
    let per_batch_out = ox_n * oy_n * oz_n;
    let row_len = kk * cout;
    let chunk = rows_per_chunk::<T>(row_len, SCRATCH_BYTES);
    let mut dx = vec![T::zero(); in_pos * cin];
    // Output coordinate that reads input coordinate `i` through kernel tap `t`.
    let source = |i: usize, t: usize, n: usize| -> Option<usize> {
        let num = (i + p).checked_sub(t)?;
        if num % s != 0 {
            return None;
        }
        let o = num / s;
        (o < n).then_some(o)
    };
    dx.par_chunks_mut(chunk * cin)
        .enumerate()
        .for_each_init(Vec::new, |dcol, (ci, dst)| {
            let rows = dst.len() / cin;
            dcol.resize(rows * row_len, T::zero());
            for (r, row) in dcol.chunks_mut(row_len).enumerate() {
                let pos = ci * chunk + r;
                let b = pos / per_batch_in;
                let rem = pos % per_batch_in;
                let (ix, iy, iz) = (rem / (iy_n * iz_n), (rem / iz_n) % iy_n, rem % iz_n);
                let obase = b * per_batch_out;
                // Every tap is written, zero where no output reads this input.
                for kx in 0..k {
                    let ox = source(ix, kx, ox_n);
                    for ky in 0..k {
                        let oy = source(iy, ky, oy_n);
                        for kz in 0..k {
                            let ki = (kx * k + ky) * k + kz;
                            let dst_row = &mut row[ki * cout..(ki + 1) * cout];
                            match (ox, oy, source(iz, kz, oz_n)) {
                                (Some(ox), Some(oy), Some(oz)) => {
                                    let src = (obase + (ox * oy_n + oy) * oz_n + oz) * cout;
                                    dst_row.copy_from_slice(&grad[src..src + cout]);
                                }
                                _ => dst_row.fill(T::zero()),
                            }
                        }
                    }
                }
            }
            gemm(
                MatRef::rows(dcol, rows, row_len),
                MatRef::rows(&w2, row_len, cin),
                T::zero(),
                dst,
            );
        });
    dx
}

/// Weight gradient `(cout x k^3 cin)`, reduced over positions in fixed lanes.
pub fn conv3d_backward_weight<T: Scalar>(grad: &[T], x: &[T], geo: &ConvGeometry) -> Vec<T> {
    let out_pos = geo.batch * geo.output().iter().product::<usize>();
    let cout = geo.out_channels;
    let col_len = geo.col_len();
    let chunk = rows_per_chunk::<T>(col_len, SCRATCH_BYTES);
    lane_reduce(out_pos, cout * col_len, |range, acc| {
        let mut start = range.start;
        let mut col = vec![T::zero(); chunk * col_len];
        while start < range.end {
            let rows = chunk.min(range.end - start);
            let col = &mut col[..rows * col_len];
            im2col(x, geo, start, col);
            gemm(
                MatRef::transposed(&grad[start * cout..(start + rows) * cout], cout, rows),
                MatRef::rows(col, rows, col_len),
                T::one(),
                acc,
            );
            start += rows;
        }
    })
}

fn channel_sums<T: Scalar>(grad: &[T], c: usize) -> Vec<T> {
    let rows = grad.len() / c;
    lane_reduce(rows, c, |range, acc| {
        for row in grad[range.start * c..range.end * c].chunks(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
    })
}

impl<T: Scalar> Graph<T> {
    /// Cubic-kernel 3D convolution, `x: [b, x, y, z, cin]`, `w: [cout, k, k, k, cin]`.
    pub fn conv3d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let [b, xn, yn, zn, cin] = x.value().dims5()?;
        let &[cout, k, k1, k2, wcin] = w.shape() else {
            return Err(TensorError::shape(
                "conv3d",
                "rank-5 weight",
                format!("{:?}", w.shape()),
            ));
        };
        if k != k1 || k != k2 {
            return Err(TensorError::invalid("conv3d", "kernel must be cubic"));
        }
        if wcin != cin {
            return Err(TensorError::shape(
                "conv3d",
                format!("{wcin} input channels"),
                format!("{cin} channels in {:?}", x.shape()),
            ));
        }
        if let Some(bv) = bias {
            if bv.shape() != [cout] {
                return Err(TensorError::shape(
                    "conv3d bias",
                    format!("[{cout}]"),
                    format!("{:?}", bv.shape()),
                ));
            }
        }
        let geo = ConvGeometry {
            batch: b,
            input: [xn, yn, zn],
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding,
        };
        geo.validate()?;
        let out = conv3d_forward(
            x.value().data(),
            w.value().data(),
            bias.map(|bv| bv.value().data()),
            &geo,
        );
        let [ox, oy, oz] = geo.output();
        let value = Tensor::new(vec![b, ox, oy, oz, cout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        if !self.needs_grad(&inputs) {
            return Ok(self.constant(value));
        }
        let (need_x, need_w) = (x.requires_grad(), w.requires_grad());
        let bias_grad = bias.map(|bv| bv.requires_grad());
        let (x_val, w_val) = (x.value().clone(), w.value().clone());
        Ok(self.custom(&inputs, value, move |g| {
            let gd = g.data();
            let mut grads = vec![
                need_x.then(|| {
                    Tensor::new(
                        x_val.shape().to_vec(),
                        conv3d_backward_input(gd, w_val.data(), &geo),
                    )
                    .expect("conv dx")
                }),
                need_w.then(|| {
                    Tensor::new(
                        w_val.shape().to_vec(),
                        conv3d_backward_weight(gd, x_val.data(), &geo),
                    )
                    .expect("conv dw")
                }),
            ];
            if let Some(need_b) = bias_grad {
                grads
                    .push(need_b.then(|| {
                        Tensor::new(vec![cout], channel_sums(gd, cout)).expect("conv db")
                    }));
            }
            grads
        }))
    }

    /// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
    /// `x: [b, x, y, z, cin]`, `w: [cin, 2, 2, 2, cout]`.
    pub fn conv_transpose3d_x2(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        bias: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let [b, xn, yn, zn, cin] = x.value().dims5()?;
        let &[wcin, 2, 2, 2, cout] = w.shape() else {
            return Err(TensorError::shape(
                "conv_transpose3d_x2",
                "[cin, 2, 2, 2, cout] weight",
                format!("{:?}", w.shape()),
            ));
        };
        if wcin != cin {
            return Err(TensorError::shape(
                "conv_transpose3d_x2",
                format!("{wcin} input channels"),
                format!("{cin} channels in {:?}", x.shape()),
            ));
        }
        if let Some(bv) = bias {
            if bv.shape() != [cout] {
                return Err(TensorError::shape(
                    "conv_transpose3d_x2 bias",
                    format!("[{cout}]"),
                    format!("{:?}", bv.shape()),
                ));
            }
        }
        let (ox, oy, oz) = (2 * xn, 2 * yn, 2 * zn);
        let slab_rows = yn * zn;
        let wide = 8 * cout;
        let ws = w.value().data();
        let xs = x.value().data();
        let bs = bias.map(|bv| bv.value().data());
        // One input x-slab maps to two contiguous output x-slabs.
        let mut out = vec![T::zero(); b * ox * oy * oz * cout];
        out.par_chunks_mut(2 * oy * oz * cout)
            .enumerate()
            .for_each_init(Vec::new, |tmp, (slab, dst)| {
                let src = &xs[slab * slab_rows * cin..(slab + 1) * slab_rows * cin];
                tmp.resize(slab_rows * wide, T::zero());
                gemm(
                    MatRef::rows(src, slab_rows, cin),
                    MatRef::rows(ws, cin, wide),
                    T::zero(),
                    tmp,
                );
                for iy in 0..yn {
                    for iz in 0..zn {
                        let trow = &tmp[(iy * zn + iz) * wide..(iy * zn + iz + 1) * wide];
                        for t in 0..8 {
                            let (dx, dy, dz) = (t >> 2, (t >> 1) & 1, t & 1);
                            let o = ((dx * oy + 2 * iy + dy) * oz + 2 * iz + dz) * cout;
                            let d = &mut dst[o..o + cout];
                            d.copy_from_slice(&trow[t * cout..(t + 1) * cout]);
                            if let Some(bs) = bs {
                                for (v, &bv) in d.iter_mut().zip(bs) {
                                    *v = *v + bv;
                                }
                            }
                        }
                    }
                }
            });
        let value = Tensor::new(vec![b, ox, oy, oz, cout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        if !self.needs_grad(&inputs) {
            return Ok(self.constant(value));
        }
        let (need_x, need_w) = (x.requires_grad(), w.requires_grad());
        let bias_grad = bias.map(|bv| bv.requires_grad());
        let (x_val, w_val) = (x.value().clone(), w.value().clone());
        Ok(self.custom(&inputs, value, move |g| {
            let gd = g.data();
            let slabs = b * xn;
            // Regroup the output gradient into (input position) x (8 cout) rows.
            let gather_slab = |slab: usize, buf: &mut [T]| {
                let base = slab * 2 * oy * oz * cout;
                for iy in 0..yn {
                    for iz in 0..zn {
                        let row = &mut buf[(iy * zn + iz) * wide..(iy * zn + iz + 1) * wide];
                        for t in 0..8 {
                            let (dx, dy, dz) = (t >> 2, (t >> 1) & 1, t & 1);
                            let o = base + ((dx * oy + 2 * iy + dy) * oz + 2 * iz + dz) * cout;
                            row[t * cout..(t + 1) * cout].copy_from_slice(&gd[o..o + cout]);
                        }
                    }
                }
            };
            let dx = need_x.then(|| {
                let mut dx = vec![T::zero(); x_val.numel()];
                dx.par_chunks_mut(slab_rows * cin)
                    .enumerate()
                    .for_each_init(Vec::new, |buf, (slab, dst)| {
                        buf.resize(slab_rows * wide, T::zero());
                        gather_slab(slab, buf);
                        gemm(
                            MatRef::rows(buf, slab_rows, wide),
                            MatRef::transposed(w_val.data(), wide, cin),
                            T::zero(),
                            dst,
                        );
                    });
                Tensor::new(x_val.shape().to_vec(), dx).expect("convT dx")
            });
            let dw = need_w.then(|| {
                let xs = x_val.data();
                let dw = lane_reduce(slabs, cin * wide, |range, acc| {
                    let mut buf = vec![T::zero(); slab_rows * wide];
                    for slab in range {
                        gather_slab(slab, &mut buf);
                        gemm(
                            MatRef::transposed(
                                &xs[slab * slab_rows * cin..(slab + 1) * slab_rows * cin],
                                cin,
                                slab_rows,
                            ),
                            MatRef::rows(&buf, slab_rows, wide),
                            T::one(),
                            acc,
                        );
                    }
                });
                Tensor::new(w_val.shape().to_vec(), dw).expect("convT dw")
            });
            let mut grads = vec![dx, dw];
            if let Some(need_b) = bias_grad {
                grads.push(
                    need_b.then(|| {
                        Tensor::new(vec![cout], channel_sums(gd, cout)).expect("convT db")
                    }),
                );
            }
            grads
        }))
    }
}
