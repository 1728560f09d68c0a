//! NIfTI-1 reading and writing (`.nii` and `.nii.gz`).

use std::path::Path;

use ndarray::{Array3, ArrayD, Axis};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, NiftiType, ReaderOptions};

use super::volume::{Geometry, ImageVolume, LabelVolume, Volume};
use crate::error::{Error, Result};

fn volume_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Volume {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Voxel-to-world geometry from a header: sform when set, else qform,
/// else plain voxel sizes.
pub fn geometry_from_header(h: &NiftiHeader) -> Geometry {
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z].map(|r| r.map(f64::from));
        return Geometry::from_affine_rows(rows);
    }
    let spacing = [h.pixdim[1], h.pixdim[2], h.pixdim[3]].map(|v| f64::from(v).abs());
    let mut g = Geometry::with_spacing(spacing);
    if h.qform_code > 0 {
        let (b, c, d) = (
            f64::from(h.quatern_b),
            f64::from(h.quatern_c),
            f64::from(h.quatern_d),
        );
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        g.direction = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                qfac * 2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                qfac * 2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                qfac * (a * a + d * d - b * b - c * c),
            ],
        ];
        g.origin = [h.quatern_x, h.quatern_y, h.quatern_z].map(f64::from);
    }
    g
}

fn header_for(geometry: &Geometry) -> NiftiHeader {
    let rows = geometry.affine_rows().map(|r| r.map(|v| v as f32));
    let s = geometry.spacing;
    NiftiHeader {
        pixdim: [
            1.0,
            s[0] as f32,
            s[1] as f32,
            s[2] as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ],
        xyzt_units: 2, // millimetres
        qform_code: 0,
        sform_code: 1,
        srow_x: rows[0],
        srow_y: rows[1],
        srow_z: rows[2],
        ..NiftiHeader::default()
    }
}

/// Reads the grid as `f64` together with its geometry and stored type.
fn read_raw(path: &Path) -> Result<(ArrayD<f64>, Geometry, NiftiType)> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| volume_err(path, e.to_string()))?;
    let header = obj.header().clone();
    let dtype = header
        .data_type()
        .map_err(|e| volume_err(path, e.to_string()))?;
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| volume_err(path, e.to_string()))?;
    let shape = arr.shape().to_vec();
    if shape.len() < 3 || shape[3..].iter().any(|&d| d != 1) {
        return Err(volume_err(
            path,
            format!("expected a 3D volume, got shape {shape:?}"),
        ));
    }
    // The reader yields column-major storage; drop singleton axes by
    // indexing so logical iteration stays x-major.
    let mut arr = arr;
    while arr.ndim() > 3 {
        let last = Axis(arr.ndim() - 1);
        arr = arr.index_axis_move(last, 0);
    }
    Ok((arr, geometry_from_header(&header), dtype))
}

fn dims_of(arr: &ArrayD<f64>) -> [usize; 3] {
    [arr.shape()[0], arr.shape()[1], arr.shape()[2]]
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageVolume> {
    let path = path.as_ref();
    let (arr, geometry, _) = read_raw(path)?;
    let dims = dims_of(&arr);
    let data: Vec<f32> = arr.iter().map(|&v| v as f32).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(volume_err(path, "image contains non-finite values"));
    }
    Volume::new(dims, geometry, data).map_err(|e| volume_err(path, e.to_string()))
}

/// Reads an integer label map. Floating-point payloads are accepted only
/// when every value is a whole number in `0..=65535`.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let (arr, geometry, dtype) = read_raw(path)?;
    if matches!(
        dtype,
        NiftiType::Complex64
            | NiftiType::Complex128
            | NiftiType::Complex256
            | NiftiType::Rgb24
            | NiftiType::Rgba32
    ) {
        return Err(volume_err(
            path,
            format!("unsupported label type {dtype:?}"),
        ));
    }
    let dims = dims_of(&arr);
    let mut data = Vec::with_capacity(arr.len());
    for &v in arr.iter() {
        if v.fract() != 0.0 || !(0.0..=f64::from(u16::MAX)).contains(&v) {
            return Err(volume_err(
                path,
                format!("label value {v} is not a class id"),
            ));
        }
        data.push(v as u16);
    }
    Volume::new(dims, geometry, data).map_err(|e| volume_err(path, e.to_string()))
}

fn grid<A>(path: &Path, dims: [usize; 3], data: Vec<A>) -> Result<Array3<A>> {
    Array3::from_shape_vec(dims, data).map_err(|e| volume_err(path, e.to_string()))
}

/// Writes `float32` voxels; gzip when the path ends in `.gz`.
pub fn write_image(path: impl AsRef<Path>, v: &ImageVolume) -> Result<()> {
    let path = path.as_ref();
    let arr = grid(path, v.dims(), v.data().to_vec())?;
    WriterOptions::new(path)
        .reference_header(&header_for(v.geometry()))
        .write_nifti(&arr)
        .map_err(|e| volume_err(path, e.to_string()))
}

/// Writes `uint16` labels; gzip when the path ends in `.gz`.
pub fn write_labels(path: impl AsRef<Path>, v: &LabelVolume) -> Result<()> {
    let path = path.as_ref();
    let arr = grid(path, v.dims(), v.data().to_vec())?;
    WriterOptions::new(path)
        .reference_header(&header_for(v.geometry()))
        .write_nifti(&arr)
        .map_err(|e| volume_err(path, e.to_string()))
}
