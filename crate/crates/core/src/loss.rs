//! Compound Dice + cross-entropy objective.
//!
//! Probabilities `s` and one-hot targets `g` are `[n, c]` row-major buffers
//! (one row per voxel). The Dice term is a single global ratio summed over
//! every voxel and every class, background included.

use cisunet_tensor::{Graph, Scalar, Tensor, Var};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Smoothing added to the Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Lower clamp on probabilities before taking the log.
pub const CE_CLAMP: f64 = 1e-12;

/// Voxel rows per partial sum; fixed so reductions do not depend on the
/// thread count.
const ROWS_PER_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 1.0, ce: 1.0 }
    }
}

impl LossWeights {
    pub fn new(dice: f64, ce: f64) -> Result<Self> {
        if !(dice >= 0.0 && ce >= 0.0 && dice.is_finite() && ce.is_finite()) {
            return Err(Error::invalid(
                "loss weights",
                format!("weights must be non-negative, got ({dice}, {ce})"),
            ));
        }
        Ok(LossWeights { dice, ce })
    }
}

fn check_pair(op: &'static str, s: &[f64], g: &[f64]) -> Result<()> {
    if s.len() != g.len() {
        return Err(Error::invalid(
            op,
            format!(
                "probabilities ({}) and targets ({}) differ in size",
                s.len(),
                g.len()
            ),
        ));
    }
    Ok(())
}

/// `1 - (2 sum(g s) + eps) / (sum(g) + sum(s) + eps)` over all voxels and classes.
pub fn dice_loss(s: &[f64], g: &[f64]) -> Result<f64> {
    check_pair("dice_loss", s, g)?;
    let (mut inter, mut sum_g, mut sum_s) = (0.0, 0.0, 0.0);
    for (&p, &t) in s.iter().zip(g) {
        inter += p * t;
        sum_g += t;
        sum_s += p;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sum_g + sum_s + DICE_SMOOTH))
}

/// `-(1/n) sum(g log max(s, clamp))` with `n = len / classes` voxels.
pub fn cross_entropy(s: &[f64], g: &[f64], classes: usize) -> Result<f64> {
    check_pair("cross_entropy", s, g)?;
    if classes == 0 || !s.len().is_multiple_of(classes) || s.is_empty() {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{} values do not form rows of {classes} classes", s.len()),
        ));
    }
    let n = (s.len() / classes) as f64;
    let total: f64 = s
        .iter()
        .zip(g)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| t * p.max(CE_CLAMP).ln())
        .sum();
    Ok(-total / n)
}

/// Row-wise softmax of `[n, c]` logits.
pub fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    out.par_chunks_mut(classes)
        .zip(logits.par_chunks(classes))
        .for_each(|(dst, row)| softmax_into(row, dst));
    out
}

fn softmax_into<T: Scalar>(row: &[T], dst: &mut [f64]) {
    let max = row
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &v) in dst.iter_mut().zip(row) {
        *d = (v.as_f64() - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// One-hot encoding of integer labels; errors on a label `>= classes`.
pub fn one_hot(labels: &[u16], classes: usize) -> Result<Vec<f64>> {
    check_labels(labels, classes)?;
    let mut out = vec![0.0; labels.len() * classes];
    for (row, &l) in out.chunks_mut(classes).zip(labels) {
        row[l as usize] = 1.0;
    }
    Ok(out)
}

fn check_labels(labels: &[u16], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid(
            "dice_ce",
            format!("label value {bad} is out of range for {classes} classes"),
        ));
    }
    Ok(())
}

/// Global sums of the loss, accumulated in fixed-size chunks.
#[derive(Clone, Copy, Default)]
struct Sums {
    inter: f64,
    sum_s: f64,
    log_true: f64,
}

fn loss_sums(probs: &[f64], labels: &[u16], classes: usize) -> Sums {
    let partials: Vec<Sums> = probs
        .par_chunks(ROWS_PER_CHUNK * classes)
        .zip(labels.par_chunks(ROWS_PER_CHUNK))
        .map(|(ps, ls)| {
            let mut acc = Sums::default();
            for (row, &l) in ps.chunks(classes).zip(ls) {
                let p = row[l as usize];
                acc.inter += p;
                acc.sum_s += row.iter().sum::<f64>();
                acc.log_true += p.max(CE_CLAMP).ln();
            }
            acc
        })
        .collect();
    partials.into_iter().fold(Sums::default(), |a, b| Sums {
        inter: a.inter + b.inter,
        sum_s: a.sum_s + b.sum_s,
        log_true: a.log_true + b.log_true,
    })
}

fn check_logits<T: Scalar>(logits: &Tensor<T>, labels: &[u16]) -> Result<usize> {
    let classes = logits.last_dim();
    if classes < 2 {
        return Err(Error::invalid("dice_ce", "need at least two classes"));
    }
    if logits.numel() != labels.len() * classes {
        return Err(Error::invalid(
            "dice_ce",
            format!(
                "logits {:?} do not match {} labels",
                logits.shape(),
                labels.len()
            ),
        ));
    }
    check_labels(labels, classes)?;
    Ok(classes)
}

/// Value of the weighted loss for channels-last logits `[..., c]` and labels
/// in the same voxel order.
pub fn dice_ce_value<T: Scalar>(logits: &Tensor<T>, labels: &[u16], w: LossWeights) -> Result<f64> {
    let classes = check_logits(logits, labels)?;
    let probs = softmax_rows(logits.data(), classes);
    Ok(combine(
        &loss_sums(&probs, labels, classes),
        labels.len(),
        w,
    ))
}

fn combine(s: &Sums, n: usize, w: LossWeights) -> f64 {
    let denom = n as f64 + s.sum_s + DICE_SMOOTH;
    let dice = 1.0 - (2.0 * s.inter + DICE_SMOOTH) / denom;
    let ce = -s.log_true / n as f64;
    w.dice * dice + w.ce * ce
}

/// Differentiable weighted Dice + cross-entropy on channels-last logits.
pub fn dice_ce<T: Scalar>(
    g: &Graph<T>,
    logits: &Var<T>,
    labels: &[u16],
    w: LossWeights,
) -> Result<Var<T>> {
    let classes = check_logits(logits.value(), labels)?;
    let n = labels.len();
    let probs = softmax_rows(logits.value().data(), classes);
    let sums = loss_sums(&probs, labels, classes);
    let value = Tensor::scalar(T::of(combine(&sums, n, w)));
    if !g.needs_grad(&[logits]) {
        return Ok(g.constant(value));
    }
    let labels = labels.to_vec();
    let shape = logits.shape().to_vec();
    Ok(g.custom(&[logits], value, move |grad| {
        let up = grad.data()[0].as_f64();
        let denom = n as f64 + sums.sum_s + DICE_SMOOTH;
        let numer = 2.0 * sums.inter + DICE_SMOOTH;
        let mut out = vec![T::zero(); probs.len()];
        out.par_chunks_mut(classes)
            .zip(probs.par_chunks(classes))
            .zip(labels.par_iter())
            .for_each(|((dst, s), &l)| {
                let mut ds = [0.0f64; 64];
                let mut ds_vec;
                let ds: &mut [f64] = if classes <= 64 {
                    &mut ds[..classes]
                } else {
                    ds_vec = vec![0.0; classes];
                    &mut ds_vec
                };
                for (c, d) in ds.iter_mut().enumerate() {
                    let t = if c == l as usize { 1.0 } else { 0.0 };
                    let dice = -(2.0 * t * denom - numer) / (denom * denom);
                    let ce = if t != 0.0 && s[c] > CE_CLAMP {
                        -1.0 / (n as f64 * s[c])
                    } else {
                        0.0
                    };
                    *d = w.dice * dice + w.ce * ce;
                }
                let dot: f64 = s.iter().zip(ds.iter()).map(|(a, b)| a * b).sum();
                for ((o, &p), &d) in dst.iter_mut().zip(s).zip(ds.iter()) {
                    *o = T::of(up * p * (d - dot));
                }
            });
        vec![Some(Tensor::new(shape, out).expect("loss grad shape"))]
    }))
}
