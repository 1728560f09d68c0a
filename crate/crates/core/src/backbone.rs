//! Convolutional encoder, decoder and segmentation head.
//!
//! Inside the network, feature maps are channels-last `[b, x, y, z, c]`.
//! The public [`forward`] takes and returns channels-first `[b, c, x, y, z]`
//! tensors and converts at the boundary.

use cisunet_tensor::{Graph, Scalar, Tensor, Var};

use crate::attention::bottleneck_forward;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{BoundParams, NetworkParameters, Scope};

pub const NORM_EPS: f64 = 1e-5;

/// Total downsampling factor between input and bottleneck.
pub const DOWNSAMPLE: usize = 16;

/// conv -> instance norm -> ReLU.
pub(crate) fn conv_norm_relu<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    p: &Scope<'_, T>,
    conv: &str,
    norm: &str,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let w = p.get(&format!("{conv}.weight"))?;
    let y = g.conv3d(x, w, None, stride, padding)?;
    let y = g.instance_norm(
        &y,
        p.get(&format!("{norm}.gamma"))?,
        p.get(&format!("{norm}.beta"))?,
        NORM_EPS,
    )?;
    Ok(g.relu(&y))
}

/// 7x7x7 stem at full resolution. `p` is the root scope.
pub fn stem_forward<T: Scalar>(g: &Graph<T>, x: &Var<T>, p: &Scope<'_, T>) -> Result<Var<T>> {
    conv_norm_relu(g, x, &p.sub("stem"), "conv", "norm", 1, 3)
}

/// `x + relu(norm(conv(relu(norm(conv(x))))))`.
///
/// The branch ends in ReLU of an instance norm with zero shift, so zero conv
/// weights make the branch exactly zero and the unit the identity.
pub fn residual_unit<T: Scalar>(g: &Graph<T>, x: &Var<T>, p: &Scope<'_, T>) -> Result<Var<T>> {
    let h = conv_norm_relu(g, x, p, "conv1", "norm1", 1, 1)?;
    let h = conv_norm_relu(g, &h, p, "conv2", "norm2", 1, 1)?;
    Ok(g.add(x, &h)?)
}

/// Encoder stage `k` (1-based): stride-2 then stride-1 conv, then the stage's
/// residual units. Odd spatial sizes round up (`ceil(n / 2)`), equivalent to
/// zero-padding to even first.
pub fn encoder_stage_forward<T: Scalar>(
    g: &Graph<T>,
    f: &Var<T>,
    k: usize,
    p: &Scope<'_, T>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    if !(1..=4).contains(&k) {
        return Err(Error::invalid(
            "encoder_stage_forward",
            format!("stage {k} not in 1..=4"),
        ));
    }
    let stage = p.sub(&format!("encoder.{k}"));
    let down = stage.sub("down");
    let mut h = conv_norm_relu(g, f, &down, "conv1", "norm1", 2, 1)?;
    h = conv_norm_relu(g, &h, &down, "conv2", "norm2", 1, 1)?;
    for j in 0..cfg.stage_depths[k - 1] {
        h = residual_unit(g, &h, &stage.sub(&format!("units.{j}")))?;
    }
    Ok(h)
}

/// One decoder step: 2x transposed conv (+ norm, ReLU), concatenation with the
/// skip, two 3x3x3 convs, and a residual connection from the upsampled input.
pub fn decoder_stage_forward<T: Scalar>(
    g: &Graph<T>,
    up_in: &Var<T>,
    skip: &Var<T>,
    p: &Scope<'_, T>,
) -> Result<Var<T>> {
    let up = g.conv_transpose3d_x2(up_in, p.get("up.weight")?, None)?;
    if up.shape()[..4] != skip.shape()[..4] {
        return Err(Error::invalid(
            "decoder_stage_forward",
            format!(
                "upsampled input {:?} does not match skip {:?}",
                &up.shape()[1..4],
                &skip.shape()[1..4]
            ),
        ));
    }
    let up = g.instance_norm(
        &up,
        p.get("up_norm.gamma")?,
        p.get("up_norm.beta")?,
        NORM_EPS,
    )?;
    let up = g.relu(&up);
    let cat = g.concat_last(&[&up, skip])?;
    let h = conv_norm_relu(g, &cat, p, "conv1", "norm1", 1, 1)?;
    let h = conv_norm_relu(g, &h, p, "conv2", "norm2", 1, 1)?;
    Ok(g.add(&up, &h)?)
}

/// Per-voxel affine map to class logits.
pub fn segmentation_head<T: Scalar>(g: &Graph<T>, f: &Var<T>, p: &Scope<'_, T>) -> Result<Var<T>> {
    Ok(g.linear(f, p.get("head.weight")?, Some(p.get("head.bias")?))?)
}

/// Stem output and the four encoder stage outputs.
pub struct FeaturePyramid<T> {
    pub stem_out: Var<T>,
    pub stage_outs: Vec<Var<T>>,
}

pub fn encode<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    p: &Scope<'_, T>,
    cfg: &ModelConfig,
) -> Result<FeaturePyramid<T>> {
    let stem_out = stem_forward(g, x, p)?;
    let mut stage_outs: Vec<Var<T>> = Vec::with_capacity(4);
    for k in 1..=4 {
        let input = stage_outs.last().unwrap_or(&stem_out);
        let out = encoder_stage_forward(g, input, k, p, cfg)?;
        stage_outs.push(out);
    }
    Ok(FeaturePyramid {
        stem_out,
        stage_outs,
    })
}

fn check_divisible(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d == 0 || d % DOWNSAMPLE != 0) {
        return Err(Error::invalid(
            "forward",
            format!("spatial dims {dims:?} must be positive multiples of {DOWNSAMPLE}"),
        ));
    }
    Ok(())
}

/// Full network on a channels-last input `[b, x, y, z, in_channels]`,
/// returning channels-last logits.
pub fn forward_graph<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    params: &BoundParams<T>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    let [_, xs, ys, zs, c] = x.value().dims5()?;
    check_divisible(&[xs, ys, zs])?;
    if c != cfg.in_channels {
        return Err(Error::invalid(
            "forward",
            format!("input has {c} channels, model expects {}", cfg.in_channels),
        ));
    }
    let p = params.root();
    let FeaturePyramid {
        stem_out,
        mut stage_outs,
    } = encode(g, x, &p, cfg)?;
    let deepest = stage_outs.pop().expect("four stages");
    let mut h = bottleneck_forward(g, &deepest, &p.sub("bottleneck"), cfg)?;
    drop(deepest);
    let mut skips = stage_outs;
    skips.insert(0, stem_out);
    for i in 1..=4 {
        let skip = skips.pop().expect("four skips");
        h = decoder_stage_forward(g, &h, &skip, &p.sub(&format!("decoder.{i}")))?;
    }
    segmentation_head(g, &h, &p)
}

/// Inference forward on a channels-first input `[b, in_channels, x, y, z]`,
/// returning channels-first logits `[b, num_classes, x, y, z]`.
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    params: &NetworkParameters<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let bound = params.bind(&g);
    let dims = x.shape();
    if dims.len() != 5 {
        return Err(Error::invalid(
            "forward",
            format!("expected rank-5 input, got {dims:?}"),
        ));
    }
    check_divisible(&dims[2..])?;
    let input = g.constant(to_channels_last(x)?);
    let logits = forward_graph(&g, &input, &bound, cfg)?;
    to_channels_first(logits.value())
}

/// `[b, c, x, y, z]` -> `[b, x, y, z, c]`.
pub fn to_channels_last<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, xs, ys, zs] = t.dims5()?;
    let n = xs * ys * zs;
    let src = t.data();
    let mut out = vec![T::zero(); t.numel()];
    for bi in 0..b {
        let dst = &mut out[bi * n * c..(bi + 1) * n * c];
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * n..(bi * c + ci + 1) * n];
            for (v, &s) in plane.iter().enumerate() {
                dst[v * c + ci] = s;
            }
        }
    }
    Ok(Tensor::new(vec![b, xs, ys, zs, c], out)?)
}

/// `[b, x, y, z, c]` -> `[b, c, x, y, z]`.
pub fn to_channels_first<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, xs, ys, zs, c] = t.dims5()?;
    let n = xs * ys * zs;
    let src = t.data();
    let mut out = vec![T::zero(); t.numel()];
    for bi in 0..b {
        let s = &src[bi * n * c..(bi + 1) * n * c];
        for ci in 0..c {
            let plane = &mut out[(bi * c + ci) * n..(bi * c + ci + 1) * n];
            for (v, d) in plane.iter_mut().enumerate() {
                *d = s[v * c + ci];
            }
        }
    }
    Ok(Tensor::new(vec![b, c, xs, ys, zs], out)?)
}
