use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Physical placement of a voxel grid: voxel `(i, j, k)` sits at
/// `origin + direction * (spacing .* (i, j, k))` in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// Unit axis directions as columns.
    pub direction: [[f64; 3]; 3],
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry::with_spacing([1.0; 3])
    }
}

impl Geometry {
    pub fn with_spacing(spacing: [f64; 3]) -> Self {
        Geometry {
            spacing,
            origin: [0.0; 3],
            direction: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rows of the voxel-to-world affine (`3 x 4`).
    pub fn affine_rows(&self) -> [[f64; 4]; 3] {
        let mut rows = [[0.0; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = self.direction[r][c] * self.spacing[c];
            }
            row[3] = self.origin[r];
        }
        rows
    }

    /// Inverse of [`Geometry::affine_rows`] for affines with orthogonal columns.
    pub fn from_affine_rows(rows: [[f64; 4]; 3]) -> Self {
        let mut g = Geometry::default();
        for c in 0..3 {
            let norm = (0..3).map(|r| rows[r][c] * rows[r][c]).sum::<f64>().sqrt();
            g.spacing[c] = norm;
            for r in 0..3 {
                g.direction[r][c] = if norm > 0.0 {
                    rows[r][c] / norm
                } else if r == c {
                    1.0
                } else {
                    0.0
                };
            }
        }
        for r in 0..3 {
            g.origin[r] = rows[r][3];
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(
                "geometry",
                format!("spacing must be positive, got {:?}", self.spacing),
            ));
        }
        Ok(())
    }
}

/// Dense 3D grid stored x-major (`x` slowest, `z` fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<V> {
    dims: [usize; 3],
    geometry: Geometry,
    data: Vec<V>,
}

/// Scalar image, e.g. CT intensities in HU.
pub type ImageVolume = Volume<f32>;
/// Integer class map.
pub type LabelVolume = Volume<u16>;

impl<V: Copy> Volume<V> {
    pub fn new(dims: [usize; 3], geometry: Geometry, data: Vec<V>) -> Result<Self> {
        geometry.validate()?;
        if dims.contains(&0) {
            return Err(Error::invalid("volume", format!("empty grid {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::invalid(
                "volume",
                format!("{} values for a {dims:?} grid", data.len()),
            ));
        }
        Ok(Volume {
            dims,
            geometry,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], geometry: Geometry, value: V) -> Result<Self> {
        Self::new(dims, geometry, vec![value; dims.iter().product()])
    }

    pub fn from_fn(
        dims: [usize; 3],
        geometry: Geometry,
        mut f: impl FnMut([usize; 3]) -> V,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(f([x, y, z]));
                }
            }
        }
        Self::new(dims, geometry, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<V> {
        self.data
    }

    pub fn index(&self, p: [usize; 3]) -> usize {
        (p[0] * self.dims[1] + p[1]) * self.dims[2] + p[2]
    }

    pub fn get(&self, p: [usize; 3]) -> V {
        self.data[self.index(p)]
    }

    pub fn set(&mut self, p: [usize; 3], v: V) {
        let i = self.index(p);
        self.data[i] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(V) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn with_geometry(mut self, geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        self.geometry = geometry;
        Ok(self)
    }

    /// Sub-grid `[origin, origin + size)`; the caller guarantees it fits.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| origin[a] + size[a] > self.dims[a]) {
            return Err(Error::invalid(
                "crop",
                format!("region {origin:?}+{size:?} exceeds {:?}", self.dims),
            ));
        }
        let mut geometry = self.geometry.clone();
        let rows = geometry.affine_rows();
        for (r, o) in geometry.origin.iter_mut().enumerate() {
            *o += (0..3).map(|c| rows[r][c] * origin[c] as f64).sum::<f64>();
        }
        Volume::from_fn(size, geometry, |p| {
            self.get([p[0] + origin[0], p[1] + origin[1], p[2] + origin[2]])
        })
    }

    /// Grows to at least `min` per axis, centring the data and filling with
    /// `fill`. Returns the padded volume and the offset of the original data.
    pub fn pad_to(&self, min: [usize; 3], fill: V) -> Result<(Self, [usize; 3])> {
        let dims = [0, 1, 2].map(|a| self.dims[a].max(min[a]));
        let offset = [0, 1, 2].map(|a| (dims[a] - self.dims[a]) / 2);
        if dims == self.dims {
            return Ok((self.clone(), offset));
        }
        let mut geometry = self.geometry.clone();
        let rows = geometry.affine_rows();
        for (r, o) in geometry.origin.iter_mut().enumerate() {
            *o -= (0..3).map(|c| rows[r][c] * offset[c] as f64).sum::<f64>();
        }
        let out = Volume::from_fn(dims, geometry, |p| {
            let inside = (0..3).all(|a| p[a] >= offset[a] && p[a] - offset[a] < self.dims[a]);
            if inside {
                self.get([p[0] - offset[0], p[1] - offset[1], p[2] - offset[2]])
            } else {
                fill
            }
        })?;
        Ok((out, offset))
    }
}

impl LabelVolume {
    /// Distinct label values present.
    pub fn label_set(&self) -> BTreeSet<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        seen.iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(v, _)| v as u16)
            .collect()
    }
}
