//! Synthetic vessel phantoms: a bright trunk tube with side branches.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{Geometry, ImageVolume, LabelVolume, Volume};
use crate::error::{Error, Result};

/// Voxel spacing of generated phantoms in mm.
pub const PHANTOM_SPACING: f64 = 1.5;

const TRUNK_HU: f64 = 220.0;
const BRANCH_HU: f64 = 150.0;
const BACKGROUND_HU: f64 = 20.0;
const NOISE_HU: f64 = 15.0;
const BLUR_SIGMA: f64 = 0.7;

/// Which structure painted each voxel.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Owner {
    None,
    Trunk,
    Branch(usize),
}

fn dist_to_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3)
        .map(|k| (ap[k] - t * ab[k]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Keeps the largest 6-connected component of `mask` (in place).
fn keep_largest_component(dims: [usize; 3], mask: &mut [bool]) {
    let mut comp = vec![u32::MAX; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    let idx = |p: [usize; 3]| (p[0] * dims[1] + p[1]) * dims[2] + p[2];
    for start in 0..mask.len() {
        if !mask[start] || comp[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0usize;
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = [
                i / (dims[1] * dims[2]),
                (i / dims[2]) % dims[1],
                i % dims[2],
            ];
            for a in 0..3 {
                for step in [-1isize, 1] {
                    let c = p[a] as isize + step;
                    if c < 0 || c >= dims[a] as isize {
                        continue;
                    }
                    let mut q = p;
                    q[a] = c as usize;
                    let j = idx(q);
                    if mask[j] && comp[j] == u32::MAX {
                        comp[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    if let Some(best) = (0..sizes.len()).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))) {
        for (m, &c) in mask.iter_mut().zip(&comp) {
            *m = *m && c == best as u32;
        }
    }
}

fn gaussian_blur(dims: [usize; 3], data: &mut [f64], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for a in 0..3 {
        let src = data.to_vec();
        for (i, out) in data.iter_mut().enumerate() {
            let pos = (i / strides[a]) % dims[a];
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                // Clamp-to-edge boundary.
                let q =
                    (pos as isize + t as isize - radius).clamp(0, dims[a] as isize - 1) as usize;
                acc += k * src[i - pos * strides[a] + q * strides[a]];
            }
            *out = acc;
        }
    }
}

/// Generates a `size^3` image (HU-like values) and label pair at
/// [`PHANTOM_SPACING`] mm. The trunk is class 1; branches cycle through
/// classes `2..num_classes` (or share class 1 when only two classes exist).
pub fn synthetic_phantom<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    num_classes: usize,
) -> Result<(ImageVolume, LabelVolume)> {
    if size < 32 {
        return Err(Error::invalid(
            "synthetic_phantom",
            format!("size {size} is below 32"),
        ));
    }
    if num_classes < 2 || num_classes > u16::MAX as usize {
        return Err(Error::invalid(
            "synthetic_phantom",
            format!("bad class count {num_classes}"),
        ));
    }
    let n = size as f64;
    let dims = [size; 3];
    let total = size * size * size;

    // Trunk: a gently curving tube running along z.
    let trunk_r = n * rng.random_range(0.08..0.11);
    let centre = [
        n * rng.random_range(0.42..0.58),
        n * rng.random_range(0.42..0.58),
    ];
    let amp = [
        n * rng.random_range(0.02..0.06),
        n * rng.random_range(0.02..0.06),
    ];
    let phase = [
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    ];
    let (z0, z1) = (n * 0.06, n * 0.94);
    let trunk_at = |z: f64| -> [f64; 2] {
        let t = z / n;
        [
            centre[0] + amp[0] * (2.0 * PI * t + phase[0]).sin(),
            centre[1] + amp[1] * (2.0 * PI * t + phase[1]).sin(),
        ]
    };

    // Branches: straight capsules leaving the trunk at spread-out heights
    // and angles.
    let branch_classes: Vec<u16> = if num_classes == 2 {
        vec![1, 1]
    } else {
        let k = (num_classes - 2).clamp(2, 13);
        (0..k).map(|i| (2 + i % (num_classes - 2)) as u16).collect()
    };
    let nb = branch_classes.len();
    let angle0 = rng.random_range(0.0..2.0 * PI);
    let mut branches = Vec::with_capacity(nb);
    for b in 0..nb {
        let frac = (b as f64 + 0.5) / nb as f64;
        let z = z0 + (z1 - z0) * (0.15 + 0.7 * frac) + rng.random_range(-0.02..0.02) * n;
        let c = trunk_at(z);
        let angle =
            angle0 + 2.0 * PI * (b as f64 * 0.618_033_988_75).fract() + rng.random_range(-0.2..0.2);
        let tilt = rng.random_range(-0.35..0.35);
        let len = n * rng.random_range(0.22..0.32);
        let dir = [angle.cos(), angle.sin(), tilt];
        let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let start = [c[0], c[1], z];
        let end = [0, 1, 2].map(|k| start[k] + len * dir[k] / dn);
        let radius = trunk_r * rng.random_range(0.45..0.6);
        branches.push((start, end, radius));
    }

    let mut owner = vec![Owner::None; total];
    for x in 0..size {
        for y in 0..size {
            for z in 0..size {
                let p = [x as f64, y as f64, z as f64];
                let i = (x * size + y) * size + z;
                let zf = p[2];
                if (z0..=z1).contains(&zf) {
                    let c = trunk_at(zf);
                    if (p[0] - c[0]).hypot(p[1] - c[1]) <= trunk_r {
                        owner[i] = Owner::Trunk;
                        continue;
                    }
                }
                for (b, (s, e, r)) in branches.iter().enumerate() {
                    if dist_to_segment(p, *s, *e) <= *r {
                        owner[i] = Owner::Branch(b);
                        break;
                    }
                }
            }
        }
    }

    // Each structure must be a single 6-connected piece.
    let mut mask = vec![false; total];
    for target in std::iter::once(Owner::Trunk).chain((0..nb).map(Owner::Branch)) {
        for (m, &o) in mask.iter_mut().zip(&owner) {
            *m = o == target;
        }
        keep_largest_component(dims, &mut mask);
        for (o, &m) in owner.iter_mut().zip(&mask) {
            if *o == target && !m {
                *o = Owner::None;
            }
        }
    }

    let labels: Vec<u16> = owner
        .iter()
        .map(|o| match o {
            Owner::None => 0,
            Owner::Trunk => 1,
            Owner::Branch(b) => branch_classes[*b],
        })
        .collect();
    let mut intensity: Vec<f64> = owner
        .iter()
        .map(|o| match o {
            Owner::None => BACKGROUND_HU,
            Owner::Trunk => TRUNK_HU,
            Owner::Branch(_) => BRANCH_HU,
        })
        .collect();
    gaussian_blur(dims, &mut intensity, BLUR_SIGMA);
    let noise = Normal::new(0.0, NOISE_HU).expect("valid noise");
    let image: Vec<f32> = intensity
        .iter()
        .map(|&v| (v + noise.sample(rng)) as f32)
        .collect();

    let geometry = Geometry::with_spacing([PHANTOM_SPACING; 3]);
    Ok((
        Volume::new(dims, geometry.clone(), image)?,
        Volume::new(dims, geometry, labels)?,
    ))
}

/// Number of 6-connected components of the voxels where `pred` holds.
pub fn count_components(labels: &LabelVolume, pred: impl Fn(u16) -> bool) -> usize {
    let dims = labels.dims();
    let mut seen = vec![false; labels.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if seen[start] || !pred(labels.data()[start]) {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let p = [
                i / (dims[1] * dims[2]),
                (i / dims[2]) % dims[1],
                i % dims[2],
            ];
            for a in 0..3 {
                for step in [-1isize, 1] {
                    let c = p[a] as isize + step;
                    if c < 0 || c >= dims[a] as isize {
                        continue;
                    }
                    let mut q = p;
                    q[a] = c as usize;
                    let j = labels.index(q);
                    if !seen[j] && pred(labels.data()[j]) {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    count
}
