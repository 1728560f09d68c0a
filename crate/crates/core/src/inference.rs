//! Whole-volume prediction with overlapping, Gaussian-blended windows.

use cisunet_tensor::Tensor;

use crate::backbone::forward;
use crate::config::{DataConfig, ModelConfig};
use crate::data::{
    preprocess_image, resample_labels_to, Geometry, ImageVolume, LabelVolume, Volume,
};
use crate::error::{Error, Result};
use crate::params::NetworkParameters;

pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Per-window weighting of logits before normalisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Blend {
    /// Separable Gaussian centred on the window with `sigma = patch / 8`.
    #[default]
    Gaussian,
    Uniform,
}

/// Anything that maps a `[1, in, px, py, pz]` patch to `[1, classes, px, py, pz]` logits.
pub trait PatchPredictor {
    fn in_channels(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn predict_patch(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// A configured network with its weights.
#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub config: ModelConfig,
    pub params: NetworkParameters<f32>,
}

impl PatchPredictor for SegmentationModel {
    fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_patch(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        forward(patch, &self.params, &self.config)
    }
}

/// Window origins over a (possibly padded) volume.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidingPlan {
    pub dims: [usize; 3],
    pub patch: [usize; 3],
    pub overlap: f64,
    /// Size after symmetric padding up to the patch size.
    pub padded: [usize; 3],
    /// Offset of the volume inside the padded grid.
    pub pad_offset: [usize; 3],
    /// Origins in the padded grid, x-major order.
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(size: usize, patch: usize, stride: usize) -> Vec<usize> {
    let n = (size - patch).div_ceil(stride) + 1;
    let mut out: Vec<usize> = (0..n).map(|i| (i * stride).min(size - patch)).collect();
    out.dedup();
    out
}

impl SlidingPlan {
    /// Windows spaced `floor(patch * (1 - overlap))` apart, the last one
    /// shifted inward so it ends at the volume edge.
    pub fn new(dims: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&overlap) {
            return Err(Error::invalid(
                "sliding_window",
                format!("overlap {overlap} outside [0, 1)"),
            ));
        }
        if patch.contains(&0) || dims.contains(&0) {
            return Err(Error::invalid("sliding_window", "empty volume or patch"));
        }
        let padded = [0, 1, 2].map(|a| dims[a].max(patch[a]));
        let pad_offset = [0, 1, 2].map(|a| (padded[a] - dims[a]) / 2);
        let per_axis: Vec<Vec<usize>> = (0..3)
            .map(|a| {
                let stride = ((patch[a] as f64 * (1.0 - overlap)).floor() as usize).max(1);
                axis_origins(padded[a], patch[a], stride)
            })
            .collect();
        let mut origins = Vec::new();
        for &x in &per_axis[0] {
            for &y in &per_axis[1] {
                for &z in &per_axis[2] {
                    origins.push([x, y, z]);
                }
            }
        }
        Ok(SlidingPlan {
            dims,
            patch,
            overlap,
            padded,
            pad_offset,
            origins,
        })
    }

    /// Blend weight of each patch voxel, x-major.
    pub fn window_weights(&self, blend: Blend) -> Vec<f32> {
        let p = self.patch;
        let axis: Vec<Vec<f64>> = (0..3)
            .map(|a| {
                let centre = (p[a] as f64 - 1.0) / 2.0;
                let sigma = p[a] as f64 / 8.0;
                (0..p[a])
                    .map(|i| match blend {
                        Blend::Gaussian => {
                            (-(i as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp()
                        }
                        Blend::Uniform => 1.0,
                    })
                    .collect()
            })
            .collect();
        let mut w = Vec::with_capacity(p.iter().product());
        for x in 0..p[0] {
            for y in 0..p[1] {
                for z in 0..p[2] {
                    w.push((axis[0][x] * axis[1][y] * axis[2][z]) as f32);
                }
            }
        }
        w
    }

    /// Sum of window weights at each padded voxel.
    pub fn normalizer(&self, blend: Blend) -> Vec<f32> {
        let w = self.window_weights(blend);
        let mut acc = vec![0.0f32; self.padded.iter().product()];
        for &o in &self.origins {
            self.for_each_voxel(o, |pi, vi| acc[vi] += w[pi]);
        }
        acc
    }

    /// Calls `f(patch_index, padded_index)` for every voxel of the window at `origin`.
    fn for_each_voxel(&self, origin: [usize; 3], mut f: impl FnMut(usize, usize)) {
        let [_, py, pz] = self.padded;
        let p = self.patch;
        let mut pi = 0;
        for x in 0..p[0] {
            for y in 0..p[1] {
                let row = ((origin[0] + x) * py + origin[1] + y) * pz + origin[2];
                for z in 0..p[2] {
                    f(pi, row + z);
                    pi += 1;
                }
            }
        }
    }
}

/// Blended logits `[1, classes, x, y, z]` for a single-channel volume.
/// Windows are evaluated and accumulated in plan order.
pub fn sliding_window_predict<P: PatchPredictor + ?Sized>(
    volume: &ImageVolume,
    model: &P,
    patch: [usize; 3],
    overlap: f64,
    blend: Blend,
) -> Result<Tensor<f32>> {
    if model.in_channels() != 1 {
        return Err(Error::invalid(
            "sliding_window",
            format!(
                "model expects {} input channels, volume has 1",
                model.in_channels()
            ),
        ));
    }
    let plan = SlidingPlan::new(volume.dims(), patch, overlap)?;
    let classes = model.num_classes();
    let (padded_vol, _) = volume.pad_to(patch, 0.0)?;
    let padded_n: usize = plan.padded.iter().product();
    let patch_n: usize = patch.iter().product();
    let weights = plan.window_weights(blend);
    let norm = plan.normalizer(blend);
    let mut acc = vec![0.0f32; classes * padded_n];
    let mut input = vec![0.0f32; patch_n];
    for &origin in &plan.origins {
        plan.for_each_voxel(origin, |pi, vi| input[pi] = padded_vol.data()[vi]);
        let x = Tensor::new([1, 1, patch[0], patch[1], patch[2]], input.clone())?;
        let logits = model.predict_patch(&x)?;
        if logits.shape() != [1, classes, patch[0], patch[1], patch[2]] {
            return Err(Error::invalid(
                "sliding_window",
                format!("model returned {:?} for patch {patch:?}", logits.shape()),
            ));
        }
        let data = logits.data();
        for c in 0..classes {
            let (src, dst) = (
                &data[c * patch_n..(c + 1) * patch_n],
                &mut acc[c * padded_n..(c + 1) * padded_n],
            );
            plan.for_each_voxel(origin, |pi, vi| dst[vi] += src[pi] * weights[pi]);
        }
    }
    let [nx, ny, nz] = plan.dims;
    let off = plan.pad_offset;
    let [_, py, pz] = plan.padded;
    let mut out = Vec::with_capacity(classes * nx * ny * nz);
    for c in 0..classes {
        let plane = &acc[c * padded_n..(c + 1) * padded_n];
        for x in 0..nx {
            for y in 0..ny {
                let row = ((x + off[0]) * py + y + off[1]) * pz + off[2];
                out.extend((0..nz).map(|z| plane[row + z] / norm[row + z]));
            }
        }
    }
    Ok(Tensor::new([1, classes, nx, ny, nz], out)?)
}

/// Voxel-wise argmax of `[1, classes, x, y, z]` logits; ties go to the lowest id.
pub fn labels_from_logits(logits: &Tensor<f32>, geometry: Geometry) -> Result<LabelVolume> {
    let [b, classes, nx, ny, nz] = logits.dims5()?;
    if b != 1 || classes < 2 {
        return Err(Error::invalid(
            "labels_from_logits",
            format!("expected [1, C>=2, x, y, z], got {:?}", logits.shape()),
        ));
    }
    let n = nx * ny * nz;
    let data = logits.data();
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..classes {
                if data[c * n + v] > data[best * n + v] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    Volume::new([nx, ny, nz], geometry, labels)
}

/// Nearest-neighbour resampling back onto `original`'s grid and geometry.
pub fn restore_geometry(labels: &LabelVolume, original: &ImageVolume) -> Result<LabelVolume> {
    original.geometry().validate()?;
    resample_labels_to(labels, original.dims(), original.spacing())?
        .with_geometry(original.geometry().clone())
}

/// Preprocess, predict, take the argmax and map back to the input grid.
pub fn segment_volume<P: PatchPredictor + ?Sized>(
    image: &ImageVolume,
    model: &P,
    data: &DataConfig,
    patch: [usize; 3],
    overlap: f64,
) -> Result<LabelVolume> {
    let pre = preprocess_image(image, data)?;
    let logits = sliding_window_predict(&pre, model, patch, overlap, Blend::Gaussian)?;
    let labels = labels_from_logits(&logits, pre.geometry().clone())?;
    restore_geometry(&labels, image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins_clip_to_the_last_fitting_window() {
        let p = SlidingPlan::new([160, 160, 160], [128; 3], 0.5).unwrap();
        assert_eq!(p.origins.len(), 8);
        assert!(p
            .origins
            .iter()
            .all(|o| o.iter().all(|&v| v == 0 || v == 32)));
        assert_eq!(
            SlidingPlan::new([128; 3], [128; 3], 0.9).unwrap().origins,
            vec![[0; 3]]
        );
        assert_eq!(axis_origins(300, 128, 64), vec![0, 64, 128, 172]);
        assert!(SlidingPlan::new([4; 3], [4; 3], 1.0).is_err());
    }

    #[test]
    fn small_volumes_are_padded_symmetrically() {
        let p = SlidingPlan::new([10, 40, 16], [16; 3], 0.5).unwrap();
        assert_eq!(p.padded, [16, 40, 16]);
        assert_eq!(p.pad_offset, [3, 0, 0]);
        assert_eq!(p.origins.len(), 4);
    }
}
