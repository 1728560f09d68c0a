//! Shifted-window attention bottleneck.
//!
//! Token grids are channels-last `[b, h, w, d, f]`. Windows are cubes of
//! `m^3` tokens; both windows and the tokens inside a window are ordered
//! x-major (x slowest, z fastest). Grids whose sides are not multiples of `m`
//! are zero-padded at the high end before partitioning and cropped after.
//!
//! The context-aware variant condenses the attended grid with patch merging,
//! restores its resolution with a transposed conv and fuses the result with
//! the embedded tokens by channel concatenation before two refinement convs.

use std::sync::Arc;

use cisunet_tensor::{Graph, Scalar, Tensor, Var, ZERO_ROW};
use rayon::prelude::*;

use crate::backbone::conv_norm_relu;
use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::params::Scope;

/// Additive mask value for blocked token pairs.
pub const MASK_NEG: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

/// The five intermediate grids of the Swin block.
#[derive(Clone, Debug)]
pub struct BottleneckActivations<T> {
    /// Input tokens.
    pub z: Tensor<T>,
    /// After window attention.
    pub z_hat: Tensor<T>,
    /// After the first MLP.
    pub z_prime: Tensor<T>,
    /// After shifted-window attention.
    pub z_bar: Tensor<T>,
    /// Block output.
    pub z_second: Tensor<T>,
}

/// Where a batch of windows came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    /// Grid size before padding.
    pub grid: [usize; 3],
    /// Grid size after padding to multiples of `window`.
    pub padded: [usize; 3],
    pub window: usize,
    pub channels: usize,
}

impl WindowLayout {
    pub fn new(batch: usize, grid: [usize; 3], window: usize, channels: usize) -> Self {
        WindowLayout {
            batch,
            grid,
            padded: grid.map(|n| n.div_ceil(window) * window),
            window,
            channels,
        }
    }

    pub fn windows_per_axis(&self) -> [usize; 3] {
        self.padded.map(|n| n / self.window)
    }

    pub fn windows_per_sample(&self) -> usize {
        self.windows_per_axis().iter().product()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.pow(3)
    }

    /// Padded-grid coordinate of token `t` of window `w` (within one sample).
    pub fn position(&self, w: usize, t: usize) -> [usize; 3] {
        let [_, ny, nz] = self.windows_per_axis();
        let m = self.window;
        let (wx, wy, wz) = (w / (ny * nz), (w / nz) % ny, w % nz);
        let (tx, ty, tz) = (t / (m * m), (t / m) % m, t % m);
        [wx * m + tx, wy * m + ty, wz * m + tz]
    }
}

fn grid_dims<T: Scalar>(z: &Var<T>, op: &'static str) -> Result<(usize, [usize; 3], usize)> {
    let [b, h, w, d, f] = z.value().dims5().map_err(|_| {
        Error::invalid(
            op,
            format!("expected a [b, h, w, d, f] grid, got {:?}", z.shape()),
        )
    })?;
    Ok((b, [h, w, d], f))
}

fn row_of(b: usize, p: [usize; 3], dims: [usize; 3]) -> u32 {
    (((b * dims[0] + p[0]) * dims[1] + p[1]) * dims[2] + p[2]) as u32
}

/// Splits a grid into `[b * windows, m^3, f]`, zero-padding as needed.
pub fn window_partition<T: Scalar>(
    g: &Graph<T>,
    z: &Var<T>,
    window: usize,
) -> Result<(Var<T>, WindowLayout)> {
    let (b, grid, f) = grid_dims(z, "window_partition")?;
    if window == 0 {
        return Err(Error::invalid(
            "window_partition",
            "window size must be positive",
        ));
    }
    let layout = WindowLayout::new(b, grid, window, f);
    let (nw, nt) = (layout.windows_per_sample(), layout.tokens_per_window());
    let mut index = Vec::with_capacity(b * nw * nt);
    for bi in 0..b {
        for w in 0..nw {
            for t in 0..nt {
                let p = layout.position(w, t);
                let inside = p.iter().zip(&grid).all(|(a, n)| a < n);
                index.push(if inside {
                    row_of(bi, p, grid)
                } else {
                    ZERO_ROW
                });
            }
        }
    }
    let out = g.gather_rows(z, f, index.into(), vec![b * nw, nt, f])?;
    Ok((out, layout))
}

/// Inverse of [`window_partition`]; strips the padding.
pub fn window_reverse<T: Scalar>(
    g: &Graph<T>,
    windows: &Var<T>,
    layout: &WindowLayout,
) -> Result<Var<T>> {
    let (nw, nt, f) = (
        layout.windows_per_sample(),
        layout.tokens_per_window(),
        layout.channels,
    );
    if windows.shape() != [layout.batch * nw, nt, f] {
        return Err(Error::invalid(
            "window_reverse",
            format!(
                "windows {:?} inconsistent with layout (expected [{}, {nt}, {f}])",
                windows.shape(),
                layout.batch * nw
            ),
        ));
    }
    let grid = layout.grid;
    let mut slot = vec![0u32; grid.iter().product::<usize>() * layout.batch];
    for bi in 0..layout.batch {
        for w in 0..nw {
            for t in 0..nt {
                let p = layout.position(w, t);
                if p.iter().zip(&grid).all(|(a, n)| a < n) {
                    slot[row_of(bi, p, grid) as usize] = ((bi * nw + w) * nt + t) as u32;
                }
            }
        }
    }
    let [h, w, d] = grid;
    Ok(g.gather_rows(windows, f, slot.into(), vec![layout.batch, h, w, d, f])?)
}

fn roll<T: Scalar>(g: &Graph<T>, z: &Var<T>, offset: isize, op: &'static str) -> Result<Var<T>> {
    let (b, dims, f) = grid_dims(z, op)?;
    let src = |i: usize, n: usize| (i as isize + offset).rem_euclid(n as isize) as usize;
    let mut index = Vec::with_capacity(b * dims.iter().product::<usize>());
    for bi in 0..b {
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for zz in 0..dims[2] {
                    let p = [src(x, dims[0]), src(y, dims[1]), src(zz, dims[2])];
                    index.push(row_of(bi, p, dims));
                }
            }
        }
    }
    Ok(g.gather_rows(z, f, index.into(), z.shape().to_vec())?)
}

/// Rolls the grid by `-shift` along every spatial axis:
/// `out[i] = in[(i + shift) mod n]`.
pub fn cyclic_shift<T: Scalar>(g: &Graph<T>, z: &Var<T>, shift: usize) -> Result<Var<T>> {
    roll(g, z, shift as isize, "cyclic_shift")
}

/// Inverse of [`cyclic_shift`].
pub fn inverse_shift<T: Scalar>(g: &Graph<T>, z: &Var<T>, shift: usize) -> Result<Var<T>> {
    roll(g, z, -(shift as isize), "inverse_shift")
}

/// Per-window additive attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub num_windows: usize,
    pub tokens: usize,
    /// `[num_windows, tokens, tokens]`, entries 0 or [`MASK_NEG`].
    pub values: Vec<f64>,
}

impl AttentionMask {
    pub fn get(&self, window: usize, p: usize, q: usize) -> f64 {
        self.values[(window * self.tokens + p) * self.tokens + q]
    }

    /// True when no pair is blocked.
    pub fn is_trivial(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Region id of a (shifted) grid coordinate along one axis: three bands
/// `[0, n - m)`, `[n - m, n - s)`, `[n - s, n)`.
fn band(i: usize, n: usize, window: usize, shift: usize) -> usize {
    if i < n - window {
        0
    } else if i < n - shift {
        1
    } else {
        2
    }
}

/// Builds the mask for attention over windows of a grid of size `dims`
/// (which must be multiples of `window`) after a cyclic shift of `shift`.
///
/// Pairs of tokens from different shift regions are blocked. When `valid` is
/// given, tokens that came from zero padding (original coordinate outside
/// `valid`) are additionally separated from real tokens.
pub fn build_window_mask(
    dims: [usize; 3],
    window: usize,
    shift: usize,
    valid: Option<[usize; 3]>,
) -> Result<AttentionMask> {
    if window == 0 || shift >= window {
        return Err(Error::invalid(
            "build_shift_mask",
            format!("need shift {shift} < window {window}"),
        ));
    }
    if dims.iter().any(|&n| n == 0 || n % window != 0) {
        return Err(Error::invalid(
            "build_shift_mask",
            format!("grid {dims:?} is not a multiple of window {window}"),
        ));
    }
    let layout = WindowLayout::new(1, dims, window, 0);
    let (nw, nt) = (layout.windows_per_sample(), layout.tokens_per_window());
    let mut values = vec![0.0; nw * nt * nt];
    let mut ids = vec![(0usize, false); nt];
    for w in 0..nw {
        for (t, id) in ids.iter_mut().enumerate() {
            let p = layout.position(w, t);
            let region = (0..3).fold(0, |acc, a| acc * 3 + band(p[a], dims[a], window, shift));
            let padded = valid.is_some_and(|v| (0..3).any(|a| (p[a] + shift) % dims[a] >= v[a]));
            *id = (region, padded);
        }
        for p in 0..nt {
            for q in 0..nt {
                if ids[p] != ids[q] {
                    values[(w * nt + p) * nt + q] = MASK_NEG;
                }
            }
        }
    }
    Ok(AttentionMask {
        num_windows: nw,
        tokens: nt,
        values,
    })
}

/// Shift mask for an `h x w x d` grid (sides multiples of `window`).
pub fn build_shift_mask(dims: [usize; 3], window: usize, shift: usize) -> Result<AttentionMask> {
    build_window_mask(dims, window, shift, None)
}

/// Table row for every ordered token pair of an `m^3` window.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let m = window;
    let span = 2 * m - 1;
    let nt = m * m * m;
    let coord = |t: usize| [t / (m * m), (t / m) % m, t % m];
    let mut index = Vec::with_capacity(nt * nt);
    for p in 0..nt {
        let a = coord(p);
        for q in 0..nt {
            let b = coord(q);
            let d: Vec<usize> = (0..3).map(|k| a[k] + m - 1 - b[k]).collect();
            index.push(((d[0] * span + d[1]) * span + d[2]) as u32);
        }
    }
    index
}

/// Scaled dot-product attention inside every window, fused with the relative
/// position bias and the optional mask.
///
/// `qkv: [windows, n, 3f]` holds queries, keys and values side by side; each
/// is split into `heads` contiguous slices. Returns the attended values
/// `[windows, n, f]` and the attention probabilities `[windows, heads, n, n]`.
pub fn window_attention<T: Scalar>(
    g: &Graph<T>,
    qkv: &Var<T>,
    table: &Var<T>,
    rel_index: Arc<[u32]>,
    mask: Option<Arc<AttentionMask>>,
    heads: usize,
) -> Result<(Var<T>, Tensor<T>)> {
    let &[nwin, nt, f3] = qkv.shape() else {
        return Err(Error::invalid(
            "window_attention",
            format!("qkv must be rank 3, got {:?}", qkv.shape()),
        ));
    };
    let f = f3 / 3;
    if f3 % 3 != 0 || heads == 0 || f % heads != 0 {
        return Err(Error::invalid(
            "window_attention",
            format!("width {f} is not divisible by {heads} heads"),
        ));
    }
    if rel_index.len() != nt * nt {
        return Err(Error::invalid(
            "window_attention",
            "relative index does not match window size",
        ));
    }
    let table_rows = table.shape()[0];
    if table.shape() != [table_rows, heads] || rel_index.iter().any(|&r| r as usize >= table_rows) {
        return Err(Error::invalid(
            "window_attention",
            format!(
                "bias table {:?} incompatible with {heads} heads",
                table.shape()
            ),
        ));
    }
    if let Some(m) = &mask {
        if m.tokens != nt || m.num_windows == 0 || nwin % m.num_windows != 0 {
            return Err(Error::invalid(
                "window_attention",
                "mask does not match windows",
            ));
        }
    }
    let hd = f / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let qkv_t = qkv.value().clone();
    let table_t = table.value().clone();

    let mut out = vec![T::zero(); nwin * nt * f];
    let mut probs = vec![T::zero(); nwin * heads * nt * nt];
    {
        let qd = qkv_t.data();
        let tb = table_t.data();
        out.par_chunks_mut(nt * f)
            .zip(probs.par_chunks_mut(heads * nt * nt))
            .enumerate()
            .for_each(|(w, (o, a))| {
                let x = &qd[w * nt * f3..(w + 1) * nt * f3];
                for h in 0..heads {
                    let ah = &mut a[h * nt * nt..(h + 1) * nt * nt];
                    for p in 0..nt {
                        let qrow = &x[p * f3 + h * hd..p * f3 + (h + 1) * hd];
                        let row = &mut ah[p * nt..(p + 1) * nt];
                        let mut max = T::neg_infinity();
                        for (q, s) in row.iter_mut().enumerate() {
                            let krow = &x[q * f3 + f + h * hd..q * f3 + f + (h + 1) * hd];
                            let mut dot = T::zero();
                            for (&qa, &ka) in qrow.iter().zip(krow) {
                                dot = dot + qa * ka;
                            }
                            let mut v =
                                scale * dot + tb[rel_index[p * nt + q] as usize * heads + h];
                            if let Some(m) = &mask {
                                v = v + T::of(m.get(w % m.num_windows, p, q));
                            }
                            *s = v;
                            max = max.max(v);
                        }
                        let mut sum = T::zero();
                        for s in row.iter_mut() {
                            *s = (*s - max).exp();
                            sum = sum + *s;
                        }
                        for s in row.iter_mut() {
                            *s = *s / sum;
                        }
                    }
                    for p in 0..nt {
                        let orow = &mut o[p * f + h * hd..p * f + (h + 1) * hd];
                        for q in 0..nt {
                            let aw = ah[p * nt + q];
                            let vrow = &x[q * f3 + 2 * f + h * hd..q * f3 + 2 * f + (h + 1) * hd];
                            for (ov, &vv) in orow.iter_mut().zip(vrow) {
                                *ov = *ov + aw * vv;
                            }
                        }
                    }
                }
            });
    }
    let probs = Tensor::new(vec![nwin, heads, nt, nt], probs)?;
    let value = Tensor::new(vec![nwin, nt, f], out)?;
    if !g.needs_grad(&[qkv, table]) {
        return Ok((g.constant(value), probs));
    }
    let saved = probs.clone();
    let (need_table, table_len) = (table.requires_grad(), table_t.numel());
    let var = g.custom(&[qkv, table], value, move |grad| {
        let go = grad.data();
        let qd = qkv_t.data();
        let ad = saved.data();
        let mut dqkv = vec![T::zero(); qd.len()];
        let partials: Vec<Vec<T>> = dqkv
            .par_chunks_mut(nt * f3)
            .enumerate()
            .map(|(w, dx)| {
                let x = &qd[w * nt * f3..(w + 1) * nt * f3];
                let gw = &go[w * nt * f..(w + 1) * nt * f];
                let mut dtable = vec![T::zero(); table_len];
                let mut ds = vec![T::zero(); nt * nt];
                for h in 0..heads {
                    let ah = &ad[(w * heads + h) * nt * nt..(w * heads + h + 1) * nt * nt];
                    let col = |r: usize, off: usize| r * f3 + off + h * hd;
                    // dV and dA
                    for p in 0..nt {
                        let gp = &gw[p * f + h * hd..p * f + (h + 1) * hd];
                        for q in 0..nt {
                            let aw = ah[p * nt + q];
                            let vrow = &x[col(q, 2 * f)..col(q, 2 * f) + hd];
                            let mut da = T::zero();
                            for d in 0..hd {
                                dx[col(q, 2 * f) + d] = dx[col(q, 2 * f) + d] + aw * gp[d];
                                da = da + gp[d] * vrow[d];
                            }
                            ds[p * nt + q] = da;
                        }
                    }
                    // softmax backward
                    for p in 0..nt {
                        let arow = &ah[p * nt..(p + 1) * nt];
                        let drow = &mut ds[p * nt..(p + 1) * nt];
                        let dot = arow
                            .iter()
                            .zip(drow.iter())
                            .fold(T::zero(), |s, (&a, &d)| s + a * d);
                        for (d, &a) in drow.iter_mut().zip(arow) {
                            *d = a * (*d - dot);
                        }
                    }
                    // dQ, dK, bias table
                    for p in 0..nt {
                        for q in 0..nt {
                            let s = ds[p * nt + q];
                            if need_table {
                                let r = rel_index[p * nt + q] as usize * heads + h;
                                dtable[r] = dtable[r] + s;
                            }
                            let ss = s * scale;
                            for d in 0..hd {
                                let (qi, ki) = (col(p, 0) + d, col(q, f) + d);
                                dx[qi] = dx[qi] + ss * x[ki];
                                dx[ki] = dx[ki] + ss * x[qi];
                            }
                        }
                    }
                }
                dtable
            })
            .collect();
        let mut dtable = vec![T::zero(); table_len];
        for part in partials {
            for (t, p) in dtable.iter_mut().zip(part) {
                *t = *t + p;
            }
        }
        vec![
            Some(Tensor::new(qkv_t.shape().to_vec(), dqkv).expect("dqkv")),
            need_table.then(|| Tensor::new(table_t.shape().to_vec(), dtable).expect("dtable")),
        ]
    });
    Ok((var, probs))
}

/// Window multi-head self-attention with the `qkv`/`proj` projections and
/// relative position bias under scope `p`. Returns the projected output and
/// the attention probabilities.
pub fn wmsa_with_probs<T: Scalar>(
    g: &Graph<T>,
    windows: &Var<T>,
    p: &Scope<'_, T>,
    heads: usize,
    window: usize,
    mask: Option<Arc<AttentionMask>>,
) -> Result<(Var<T>, Tensor<T>)> {
    let f = windows.value().last_dim();
    if heads == 0 || !f.is_multiple_of(heads) {
        return Err(Error::invalid(
            "wmsa",
            format!("width {f} is not divisible by {heads} heads"),
        ));
    }
    let qkv = g.linear(windows, p.get("qkv.weight")?, Some(p.get("qkv.bias")?))?;
    let index: Arc<[u32]> = relative_position_index(window).into();
    let (att, probs) = window_attention(g, &qkv, p.get("rel_bias")?, index, mask, heads)?;
    let out = g.linear(&att, p.get("proj.weight")?, Some(p.get("proj.bias")?))?;
    Ok((out, probs))
}

pub fn wmsa<T: Scalar>(
    g: &Graph<T>,
    windows: &Var<T>,
    p: &Scope<'_, T>,
    heads: usize,
    window: usize,
    mask: Option<Arc<AttentionMask>>,
) -> Result<Var<T>> {
    Ok(wmsa_with_probs(g, windows, p, heads, window, mask)?.0)
}

/// Two affine layers with GELU in between.
pub fn mlp<T: Scalar>(g: &Graph<T>, x: &Var<T>, p: &Scope<'_, T>) -> Result<Var<T>> {
    let h = g.linear(x, p.get("fc1.weight")?, Some(p.get("fc1.bias")?))?;
    let h = g.gelu(&h);
    Ok(g.linear(&h, p.get("fc2.weight")?, Some(p.get("fc2.bias")?))?)
}

fn layer_norm<T: Scalar>(g: &Graph<T>, x: &Var<T>, p: &Scope<'_, T>, name: &str) -> Result<Var<T>> {
    Ok(g.layer_norm(
        x,
        p.get(&format!("{name}.gamma"))?,
        p.get(&format!("{name}.beta"))?,
        LN_EPS,
    )?)
}

fn pad_grid<T: Scalar>(g: &Graph<T>, z: &Var<T>, to: [usize; 3]) -> Result<Var<T>> {
    let (b, dims, f) = grid_dims(z, "pad")?;
    if dims == to {
        return Ok(z.clone());
    }
    let mut index = Vec::with_capacity(b * to.iter().product::<usize>());
    for bi in 0..b {
        for x in 0..to[0] {
            for y in 0..to[1] {
                for zz in 0..to[2] {
                    let p = [x, y, zz];
                    let inside = p.iter().zip(&dims).all(|(a, n)| a < n);
                    index.push(if inside {
                        row_of(bi, p, dims)
                    } else {
                        ZERO_ROW
                    });
                }
            }
        }
    }
    Ok(g.gather_rows(z, f, index.into(), vec![b, to[0], to[1], to[2], f])?)
}

fn crop_grid<T: Scalar>(g: &Graph<T>, z: &Var<T>, to: [usize; 3]) -> Result<Var<T>> {
    let (b, dims, f) = grid_dims(z, "crop")?;
    if dims == to {
        return Ok(z.clone());
    }
    if to.iter().zip(&dims).any(|(t, d)| t > d) {
        return Err(Error::invalid(
            "crop",
            format!("cannot crop {dims:?} to {to:?}"),
        ));
    }
    let mut index = Vec::with_capacity(b * to.iter().product::<usize>());
    for bi in 0..b {
        for x in 0..to[0] {
            for y in 0..to[1] {
                for zz in 0..to[2] {
                    index.push(row_of(bi, [x, y, zz], dims));
                }
            }
        }
    }
    Ok(g.gather_rows(z, f, index.into(), vec![b, to[0], to[1], to[2], f])?)
}

/// The four residual equations of the Swin block:
/// `z^ = W-MSA(LN(z)) + z`, `z' = MLP(LN(z^)) + z^`,
/// `z- = SW-MSA(LN(z')) + z'`, `z'' = MLP(LN(z-)) + z-`.
pub fn swin_block<T: Scalar>(
    g: &Graph<T>,
    z: &Var<T>,
    p: &Scope<'_, T>,
    cfg: &ModelConfig,
) -> Result<(Var<T>, BottleneckActivations<T>)> {
    let (_, dims, f) = grid_dims(z, "swin_block")?;
    if f != cfg.embed_dim {
        return Err(Error::invalid(
            "swin_block",
            format!("token width {f} differs from embed_dim {}", cfg.embed_dim),
        ));
    }
    let (m, s, heads) = (cfg.window_size, cfg.shift_size, cfg.num_heads);
    let padded = dims.map(|n| n.div_ceil(m) * m);
    let has_pad = padded != dims;

    let plain_mask = if has_pad {
        Some(Arc::new(build_window_mask(padded, m, 0, Some(dims))?))
    } else {
        None
    };
    let u = layer_norm(g, z, p, "norm1")?;
    let (win, layout) = window_partition(g, &u, m)?;
    let att = wmsa(g, &win, &p.sub("wmsa"), heads, m, plain_mask)?;
    let att = window_reverse(g, &att, &layout)?;
    let z_hat = g.add(z, &att)?;

    let u = layer_norm(g, &z_hat, p, "norm2")?;
    let z_prime = g.add(&z_hat, &mlp(g, &u, &p.sub("mlp1"))?)?;

    let shift_mask = build_window_mask(padded, m, s, has_pad.then_some(dims))?;
    let shift_mask = (!shift_mask.is_trivial()).then(|| Arc::new(shift_mask));
    let u = layer_norm(g, &z_prime, p, "norm3")?;
    let u = pad_grid(g, &u, padded)?;
    let u = cyclic_shift(g, &u, s)?;
    let (win, layout) = window_partition(g, &u, m)?;
    let att = wmsa(g, &win, &p.sub("swmsa"), heads, m, shift_mask)?;
    let att = window_reverse(g, &att, &layout)?;
    let att = inverse_shift(g, &att, s)?;
    let att = crop_grid(g, &att, dims)?;
    let z_bar = g.add(&z_prime, &att)?;

    let u = layer_norm(g, &z_bar, p, "norm4")?;
    let z_second = g.add(&z_bar, &mlp(g, &u, &p.sub("mlp2"))?)?;

    let acts = BottleneckActivations {
        z: z.value().clone(),
        z_hat: z_hat.value().clone(),
        z_prime: z_prime.value().clone(),
        z_bar: z_bar.value().clone(),
        z_second: z_second.value().clone(),
    };
    Ok((z_second, acts))
}

/// Per-voxel projection from encoder channels to token width.
pub fn linear_embed<T: Scalar>(g: &Graph<T>, f: &Var<T>, p: &Scope<'_, T>) -> Result<Var<T>> {
    Ok(g.linear(f, p.get("weight")?, Some(p.get("bias")?))?)
}

/// Concatenates each 2x2x2 neighbourhood (neighbour order `(dx, dy, dz)`
/// x-major) into `8f` channels, layer-normalises and projects to `2f`.
/// Odd sides are zero-padded to even first.
pub fn patch_merge<T: Scalar>(g: &Graph<T>, z: &Var<T>, p: &Scope<'_, T>) -> Result<Var<T>> {
    let (b, dims, f) = grid_dims(z, "patch_merge")?;
    let half = dims.map(|n| n.div_ceil(2));
    let mut index = Vec::with_capacity(b * half.iter().product::<usize>() * 8);
    for bi in 0..b {
        for x in 0..half[0] {
            for y in 0..half[1] {
                for zz in 0..half[2] {
                    for n in 0..8 {
                        let q = [2 * x + n / 4, 2 * y + (n / 2) % 2, 2 * zz + n % 2];
                        let inside = q.iter().zip(&dims).all(|(a, d)| a < d);
                        index.push(if inside {
                            row_of(bi, q, dims)
                        } else {
                            ZERO_ROW
                        });
                    }
                }
            }
        }
    }
    let cat = g.gather_rows(
        z,
        f,
        index.into(),
        vec![b, half[0], half[1], half[2], 8 * f],
    )?;
    let normed = layer_norm(g, &cat, p, "norm")?;
    Ok(g.linear(
        &normed,
        p.get("reduce.weight")?,
        Some(p.get("reduce.bias")?),
    )?)
}

/// 2x transposed conv (`2f -> f`), cropped to `target` when the merged grid
/// came from a padded odd-sized grid.
pub fn context_upsample<T: Scalar>(
    g: &Graph<T>,
    m: &Var<T>,
    p: &Scope<'_, T>,
    target: [usize; 3],
) -> Result<Var<T>> {
    let up = g.conv_transpose3d_x2(m, p.get("weight")?, Some(p.get("bias")?))?;
    crop_grid(g, &up, target)
}

fn refine<T: Scalar>(g: &Graph<T>, x: &Var<T>, p: &Scope<'_, T>) -> Result<Var<T>> {
    let h = conv_norm_relu(g, x, p, "conv1", "norm1", 1, 1)?;
    conv_norm_relu(g, &h, p, "conv2", "norm2", 1, 1)
}

/// Context-aware bottleneck: embed, Swin block, merge + upsample for global
/// context, fuse with the embedded tokens, refine. `p` is the bottleneck scope.
pub fn csw_sa<T: Scalar>(
    g: &Graph<T>,
    f_enc: &Var<T>,
    p: &Scope<'_, T>,
    cfg: &ModelConfig,
) -> Result<(Var<T>, BottleneckActivations<T>)> {
    let z = linear_embed(g, f_enc, &p.sub("embed"))?;
    let (z2, acts) = swin_block(g, &z, &p.sub("swin"), cfg)?;
    let (_, dims, _) = grid_dims(&z, "csw_sa")?;
    let merged = patch_merge(g, &z2, &p.sub("merge"))?;
    let context = context_upsample(g, &merged, &p.sub("upsample"), dims)?;
    let fused = g.concat_last(&[&context, &z])?;
    Ok((refine(g, &fused, &p.sub("refine"))?, acts))
}

/// Plain shifted-window bottleneck: embed, Swin block, refine.
pub fn sw_sa<T: Scalar>(
    g: &Graph<T>,
    f_enc: &Var<T>,
    p: &Scope<'_, T>,
    cfg: &ModelConfig,
) -> Result<(Var<T>, BottleneckActivations<T>)> {
    let z = linear_embed(g, f_enc, &p.sub("embed"))?;
    let (z2, acts) = swin_block(g, &z, &p.sub("swin"), cfg)?;
    Ok((refine(g, &z2, &p.sub("refine"))?, acts))
}

/// Bottleneck selected by `cfg.attention_variant`.
pub fn bottleneck_forward<T: Scalar>(
    g: &Graph<T>,
    f_enc: &Var<T>,
    p: &Scope<'_, T>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    let (out, _) = match cfg.attention_variant {
        AttentionVariant::CswSa => csw_sa(g, f_enc, p, cfg)?,
        AttentionVariant::SwSa => sw_sa(g, f_enc, p, cfg)?,
    };
    Ok(out)
}
