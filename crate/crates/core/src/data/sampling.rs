//! Foreground/background balanced random crops.

use rand::Rng;

use super::volume::{ImageVolume, LabelVolume};
use crate::error::{Error, Result};

/// How a crop centre was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropDraw {
    Foreground,
    Background,
    /// A foreground centre was requested but the volume has no foreground.
    FallbackBackground,
    /// A background centre was requested but the volume is all foreground.
    FallbackForeground,
}

impl CropDraw {
    pub fn is_fallback(self) -> bool {
        matches!(
            self,
            CropDraw::FallbackBackground | CropDraw::FallbackForeground
        )
    }

    pub fn centred_on_foreground(self) -> bool {
        matches!(self, CropDraw::Foreground | CropDraw::FallbackForeground)
    }
}

/// An image/label crop with enough provenance to reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePatch {
    pub image: ImageVolume,
    pub labels: LabelVolume,
    pub source: String,
    /// Crop origin in the padded volume.
    pub origin: [usize; 3],
    /// Offset of the source volume inside the padded volume.
    pub pad_offset: [usize; 3],
    pub center: [usize; 3],
    pub draw: CropDraw,
}

/// Precomputed state for repeatedly cropping one volume.
pub struct CropSampler {
    source: String,
    image: ImageVolume,
    labels: LabelVolume,
    pad_offset: [usize; 3],
    patch: [usize; 3],
    foreground: Vec<u32>,
    background: Vec<u32>,
}

impl CropSampler {
    /// Pads the pair symmetrically (image with `0`, labels with background)
    /// when smaller than `patch`.
    pub fn new(
        source: impl Into<String>,
        image: &ImageVolume,
        labels: &LabelVolume,
        patch: [usize; 3],
    ) -> Result<Self> {
        if image.dims() != labels.dims() {
            return Err(Error::invalid(
                "crop_pos_neg",
                format!(
                    "image {:?} and labels {:?} differ in size",
                    image.dims(),
                    labels.dims()
                ),
            ));
        }
        if patch.contains(&0) {
            return Err(Error::invalid(
                "crop_pos_neg",
                "patch size must be positive",
            ));
        }
        let (image, pad_offset) = image.pad_to(patch, 0.0)?;
        let (labels, _) = labels.pad_to(patch, 0)?;
        let mut foreground = Vec::new();
        let mut background = Vec::new();
        for (i, &l) in labels.data().iter().enumerate() {
            if l != 0 {
                foreground.push(i as u32);
            } else {
                background.push(i as u32);
            }
        }
        Ok(CropSampler {
            source: source.into(),
            image,
            labels,
            pad_offset,
            patch,
            foreground,
            background,
        })
    }

    pub fn foreground_voxels(&self) -> usize {
        self.foreground.len()
    }

    /// Draws one crop; the centre is foreground with probability
    /// `wpos / (wpos + wneg)`.
    pub fn sample<R: Rng + ?Sized>(&self, ratio: (f64, f64), rng: &mut R) -> Result<SamplePatch> {
        let (wpos, wneg) = ratio;
        if !(wpos >= 0.0 && wneg >= 0.0 && wpos + wneg > 0.0) {
            return Err(Error::invalid(
                "crop_pos_neg",
                format!("bad ratio ({wpos}, {wneg})"),
            ));
        }
        let want_fg = rng.random::<f64>() < wpos / (wpos + wneg);
        let (pool, draw) = match (
            want_fg,
            self.foreground.is_empty(),
            self.background.is_empty(),
        ) {
            (true, false, _) => (&self.foreground, CropDraw::Foreground),
            (true, true, _) => {
                log::warn!(
                    "{}: no foreground voxels, using a background centre",
                    self.source
                );
                (&self.background, CropDraw::FallbackBackground)
            }
            (false, _, false) => (&self.background, CropDraw::Background),
            (false, _, true) => (&self.foreground, CropDraw::FallbackForeground),
        };
        let flat = pool[rng.random_range(0..pool.len())] as usize;
        let dims = self.image.dims();
        let center = [
            flat / (dims[1] * dims[2]),
            (flat / dims[2]) % dims[1],
            flat % dims[2],
        ];
        let origin = [0, 1, 2].map(|a| {
            center[a]
                .saturating_sub(self.patch[a] / 2)
                .min(dims[a] - self.patch[a])
        });
        Ok(SamplePatch {
            image: self.image.crop(origin, self.patch)?,
            labels: self.labels.crop(origin, self.patch)?,
            source: self.source.clone(),
            origin,
            pad_offset: self.pad_offset,
            center,
            draw,
        })
    }
}

/// Draws `count` crops of size `patch` from one image/label pair.
pub fn crop_pos_neg<R: Rng + ?Sized>(
    image: &ImageVolume,
    labels: &LabelVolume,
    patch: [usize; 3],
    ratio: (f64, f64),
    count: usize,
    rng: &mut R,
) -> Result<Vec<SamplePatch>> {
    let sampler = CropSampler::new("volume", image, labels, patch)?;
    (0..count).map(|_| sampler.sample(ratio, rng)).collect()
}
