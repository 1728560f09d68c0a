//! Resampling and intensity normalisation.

use super::volume::{Geometry, ImageVolume, LabelVolume, Volume};
use crate::error::{Error, Result};

/// Output grid size when resampling `dims` from `spacing` to `target`:
/// `round(dim * spacing / target)` per axis.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> Result<[usize; 3]> {
    let out = [0, 1, 2].map(|a| (dims[a] as f64 * spacing[a] / target[a]).round() as usize);
    if out.contains(&0) {
        return Err(Error::invalid(
            "resample",
            format!("resampling {dims:?} at {spacing:?} mm to {target:?} mm leaves an empty axis"),
        ));
    }
    Ok(out)
}

fn target_geometry(src: &Geometry, spacing: [f64; 3]) -> Geometry {
    Geometry {
        spacing,
        origin: src.origin,
        direction: src.direction,
    }
}

/// Source coordinate (in source voxels) of output voxel `j` along one axis.
fn source_coord(j: usize, out_spacing: f64, in_spacing: f64) -> f64 {
    j as f64 * out_spacing / in_spacing
}

/// Trilinear resampling onto an explicit grid.
pub fn resample_image_to(
    v: &ImageVolume,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<ImageVolume> {
    if dims == v.dims() && spacing == v.spacing() {
        return Ok(v.clone());
    }
    let src = v.spacing();
    let n = v.dims();
    // Per-axis (lower index, upper index, upper weight) tables.
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..dims[a])
                .map(|j| {
                    let c = source_coord(j, spacing[a], src[a]).clamp(0.0, (n[a] - 1) as f64);
                    let lo = c.floor() as usize;
                    let hi = (lo + 1).min(n[a] - 1);
                    (lo, hi, c - lo as f64)
                })
                .collect()
        })
        .collect();
    Volume::from_fn(dims, target_geometry(v.geometry(), spacing), |[x, y, z]| {
        let (x0, x1, wx) = taps[0][x];
        let (y0, y1, wy) = taps[1][y];
        let (z0, z1, wz) = taps[2][z];
        let at = |i, j, k| f64::from(v.get([i, j, k]));
        let c00 = at(x0, y0, z0) * (1.0 - wz) + at(x0, y0, z1) * wz;
        let c01 = at(x0, y1, z0) * (1.0 - wz) + at(x0, y1, z1) * wz;
        let c10 = at(x1, y0, z0) * (1.0 - wz) + at(x1, y0, z1) * wz;
        let c11 = at(x1, y1, z0) * (1.0 - wz) + at(x1, y1, z1) * wz;
        let c0 = c00 * (1.0 - wy) + c01 * wy;
        let c1 = c10 * (1.0 - wy) + c11 * wy;
        (c0 * (1.0 - wx) + c1 * wx) as f32
    })
}

/// Nearest-neighbour resampling onto an explicit grid; never creates labels.
pub fn resample_labels_to(
    v: &LabelVolume,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<LabelVolume> {
    if dims == v.dims() && spacing == v.spacing() {
        return Ok(v.clone());
    }
    let src = v.spacing();
    let n = v.dims();
    let nearest: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..dims[a])
                .map(|j| (source_coord(j, spacing[a], src[a]).round() as usize).min(n[a] - 1))
                .collect()
        })
        .collect();
    Volume::from_fn(dims, target_geometry(v.geometry(), spacing), |[x, y, z]| {
        v.get([nearest[0][x], nearest[1][y], nearest[2][z]])
    })
}

/// Trilinear resampling to isotropic `target` mm.
pub fn resample_image(v: &ImageVolume, target: f64) -> Result<ImageVolume> {
    let t = [target; 3];
    resample_image_to(v, resampled_dims(v.dims(), v.spacing(), t)?, t)
}

/// Nearest-neighbour resampling to isotropic `target` mm.
pub fn resample_labels(v: &LabelVolume, target: f64) -> Result<LabelVolume> {
    let t = [target; 3];
    resample_labels_to(v, resampled_dims(v.dims(), v.spacing(), t)?, t)
}

/// Clamps to `[lo, hi]` and maps linearly onto `[0, 1]`.
pub fn normalize_intensity(v: &ImageVolume, window: (f64, f64)) -> Result<ImageVolume> {
    let (lo, hi) = window;
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::invalid(
            "normalize_intensity",
            format!("need lo < hi, got ({lo}, {hi})"),
        ));
    }
    Ok(v.map(|x| ((f64::from(x).clamp(lo, hi) - lo) / (hi - lo)) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims_follow_rounding_rule() {
        let d = resampled_dims([512, 512, 100], [0.875, 0.875, 3.0], [1.5; 3]).unwrap();
        assert_eq!(d, [299, 299, 200]);
        assert!(resampled_dims([1, 4, 4], [0.1, 1.0, 1.0], [1.5; 3]).is_err());
    }

    #[test]
    fn identity_at_target_spacing() {
        let g = Geometry::with_spacing([1.5; 3]);
        let v = Volume::from_fn([5, 6, 7], g, |p| (p[0] * 100 + p[1] * 10 + p[2]) as f32).unwrap();
        assert_eq!(resample_image(&v, 1.5).unwrap(), v);
        let l = v.map(|x| (x as u16) % 5);
        assert_eq!(resample_labels(&l, 1.5).unwrap(), l);
    }

    #[test]
    fn trilinear_reproduces_linear_ramps() {
        let v = Volume::from_fn([9, 9, 9], Geometry::with_spacing([1.0; 3]), |p| {
            (2.0 * p[0] as f64 - p[1] as f64 + 0.5 * p[2] as f64) as f32
        })
        .unwrap();
        let r = resample_image(&v, 2.0).unwrap();
        assert_eq!(r.dims(), [5, 5, 5]); // round(4.5) = 5 (half away from zero)
        for x in 0..4 {
            let expected = 2.0 * (2 * x) as f32;
            assert!((r.get([x, 0, 0]) - expected).abs() < 1e-5);
        }
        let half = resample_image(&v, 0.5).unwrap();
        assert!((half.get([1, 1, 1]) - (1.0 - 0.5 + 0.25)).abs() < 1e-5);
    }

    #[test]
    fn normalisation_maps_window_to_unit_interval() {
        let v = Volume::new(
            [1, 1, 5],
            Geometry::default(),
            vec![-1000.0, -175.0, 37.5, 250.0, 3000.0],
        )
        .unwrap();
        let n = normalize_intensity(&v, (-175.0, 250.0)).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
        assert!(normalize_intensity(&v, (1.0, 1.0)).is_err());
    }
}
