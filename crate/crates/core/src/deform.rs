//! Sparse control grids, displacement label sets, cubic B-spline FFD
//! densification, field composition, and image/mask warping.

use crate::error::{Error, Result};
use crate::volume::{Geometry, SegMask, Volume};

/// Regular control-point lattice with 6-neighborhood edges.
///
/// Nodes sit on a regular grid with pitch `spacing_mm`, starting at
/// `origin_mm` (node index (0,0,0)). Grids built with [`build_grid`] carry
/// one margin node beyond each volume face so that cubic B-spline support
/// stays inside the lattice.
#[derive(Debug, Clone)]
pub struct ControlGrid {
    pub grid_dims: [usize; 3],
    pub spacing_mm: f64,
    pub origin_mm: [f64; 3],
    pub node_positions: Vec<[f64; 3]>,
    pub edges: Vec<(usize, usize)>,
}

impl ControlGrid {
    /// Builds a bare lattice with the given node counts, pitch and origin.
    pub fn lattice(grid_dims: [usize; 3], spacing_mm: f64, origin_mm: [f64; 3]) -> Self {
        let [gx, gy, gz] = grid_dims;
        let mut node_positions = Vec::with_capacity(gx * gy * gz);
        for k in 0..gz {
            for j in 0..gy {
                for i in 0..gx {
                    node_positions.push([
                        origin_mm[0] + i as f64 * spacing_mm,
                        origin_mm[1] + j as f64 * spacing_mm,
                        origin_mm[2] + k as f64 * spacing_mm,
                    ]);
                }
            }
        }
        let idx = |i: usize, j: usize, k: usize| i + gx * (j + gy * k);
        let mut edges = Vec::new();
        for k in 0..gz {
            for j in 0..gy {
                for i in 0..gx {
                    if i + 1 < gx {
                        edges.push((idx(i, j, k), idx(i + 1, j, k)));
                    }
                    if j + 1 < gy {
                        edges.push((idx(i, j, k), idx(i, j + 1, k)));
                    }
                    if k + 1 < gz {
                        edges.push((idx(i, j, k), idx(i, j, k + 1)));
                    }
                }
            }
        }
        Self {
            grid_dims,
            spacing_mm,
            origin_mm,
            node_positions,
            edges,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.grid_dims[0] * self.grid_dims[1] * self.grid_dims[2]
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid_dims[0] * (j + self.grid_dims[1] * k)
    }

    /// True for nodes in the one-node margin ring outside the volume extent.
    pub fn is_margin(&self, node: usize) -> bool {
        let [gx, gy] = [self.grid_dims[0], self.grid_dims[1]];
        let i = node % gx;
        let j = (node / gx) % gy;
        let k = node / (gx * gy);
        i == 0
            || j == 0
            || k == 0
            || i == self.grid_dims[0] - 1
            || j == self.grid_dims[1] - 1
            || k == self.grid_dims[2] - 1
    }
}

/// Builds a control grid spanning the volume extent with one margin node
/// beyond each face.
pub fn build_grid(geom: &Geometry, spacing_mm: f64) -> Result<ControlGrid> {
    if !(spacing_mm > 0.0) {
        return Err(Error::InvalidConfig("grid spacing must be positive".into()));
    }
    let ext = geom.extent_mm();
    let mut dims = [0usize; 3];
    for a in 0..3 {
        // interior nodes cover [0, extent] at the given pitch, plus margins
        let interior = (ext[a] / spacing_mm).ceil() as usize + 1;
        dims[a] = interior + 2;
    }
    let origin = [
        geom.origin[0] - spacing_mm,
        geom.origin[1] - spacing_mm,
        geom.origin[2] - spacing_mm,
    ];
    Ok(ControlGrid::lattice(dims, spacing_mm, origin))
}

/// Ordered set of candidate 3D displacement vectors (mm).
#[derive(Debug, Clone)]
pub struct DisplacementLabelSet {
    pub vectors: Vec<[f64; 3]>,
    pub max_step_mm: f64,
}

impl DisplacementLabelSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Index of the zero displacement.
    pub fn zero_index(&self) -> usize {
        self.vectors
            .iter()
            .position(|v| v == &[0.0, 0.0, 0.0])
            .expect("label set always contains the zero vector")
    }

    /// L1 distance between two labels.
    #[inline]
    pub fn l1(&self, a: usize, b: usize) -> f64 {
        let u = self.vectors[a];
        let v = self.vectors[b];
        (u[0] - v[0]).abs() + (u[1] - v[1]).abs() + (u[2] - v[2]).abs()
    }
}

/// Builds a dense `per_axis`^3 lattice of displacements spanning
/// [-max_step, +max_step] per axis, with the zero vector at the center.
///
/// A zero `max_step_mm` collapses to the single zero vector so the
/// "zero appears exactly once" invariant holds.
pub fn build_label_set(max_step_mm: f64, per_axis: usize) -> Result<DisplacementLabelSet> {
    if per_axis == 0 || per_axis % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "labels per axis must be odd and >= 1, got {per_axis}"
        )));
    }
    if max_step_mm < 0.0 {
        return Err(Error::InvalidConfig("max step must be >= 0".into()));
    }
    if per_axis == 1 || max_step_mm == 0.0 {
        return Ok(DisplacementLabelSet {
            vectors: vec![[0.0, 0.0, 0.0]],
            max_step_mm,
        });
    }
    let half = (per_axis / 2) as i64;
    let step = max_step_mm / half as f64;
    let mut vectors = Vec::with_capacity(per_axis * per_axis * per_axis);
    for k in -half..=half {
        for j in -half..=half {
            for i in -half..=half {
                vectors.push([i as f64 * step, j as f64 * step, k as f64 * step]);
            }
        }
    }
    Ok(DisplacementLabelSet {
        vectors,
        max_step_mm,
    })
}

/// Per-node label assignment (indices into a [`DisplacementLabelSet`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeformationLabeling {
    pub labels: Vec<usize>,
}

impl DeformationLabeling {
    pub fn zeros(grid: &ControlGrid, labels: &DisplacementLabelSet) -> Self {
        Self {
            labels: vec![labels.zero_index(); grid.num_nodes()],
        }
    }

    pub fn validate(&self, grid: &ControlGrid, labels: &DisplacementLabelSet) -> Result<()> {
        if self.labels.len() != grid.num_nodes() {
            return Err(Error::InvalidConfig(format!(
                "labeling length {} != node count {}",
                self.labels.len(),
                grid.num_nodes()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= labels.len()) {
            return Err(Error::InvalidConfig(format!(
                "label index {l} out of range ({} labels)",
                labels.len()
            )));
        }
        Ok(())
    }

    /// Resolves the labeling into per-node displacement vectors.
    pub fn node_displacements(&self, labels: &DisplacementLabelSet) -> Vec<[f64; 3]> {
        self.labels.iter().map(|&l| labels.vectors[l]).collect()
    }
}

/// Dense per-voxel displacement field (mm) on a volume geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    pub geom: Geometry,
    pub vectors: Vec<[f32; 3]>,
}

impl DenseField {
    pub fn zeros(geom: Geometry) -> Self {
        Self {
            vectors: vec![[0.0; 3]; geom.voxel_count()],
            geom,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        self.vectors[self.geom.index(x, y, z)]
    }

    /// Trilinear sample of the field at continuous voxel coordinates.
    pub fn sample(&self, v: [f64; 3]) -> [f64; 3] {
        let d = self.geom.dims;
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let c = v[a].clamp(0.0, (d[a] - 1) as f64);
            let f = c.floor();
            i0[a] = f as usize;
            i1[a] = (i0[a] + 1).min(d[a] - 1);
            t[a] = c - f;
        }
        let mut acc = [0.0f64; 3];
        for (dz, wz) in [(i0[2], 1.0 - t[2]), (i1[2], t[2])] {
            for (dy, wy) in [(i0[1], 1.0 - t[1]), (i1[1], t[1])] {
                for (dx, wx) in [(i0[0], 1.0 - t[0]), (i1[0], t[0])] {
                    let u = self.vectors[self.geom.index(dx, dy, dz)];
                    let w = wx * wy * wz;
                    acc[0] += w * u[0] as f64;
                    acc[1] += w * u[1] as f64;
                    acc[2] += w * u[2] as f64;
                }
            }
        }
        acc
    }

    /// Mean displacement magnitude in voxel units of the field geometry.
    pub fn mean_magnitude_vox(&self) -> f64 {
        let s = self.geom.spacing;
        let sum: f64 = self
            .vectors
            .iter()
            .map(|u| {
                let vx = u[0] as f64 / s[0];
                let vy = u[1] as f64 / s[1];
                let vz = u[2] as f64 / s[2];
                (vx * vx + vy * vy + vz * vz).sqrt()
            })
            .sum();
        sum / self.vectors.len() as f64
    }

    /// Resamples the field onto another geometry (trilinear, mm values kept).
    pub fn resample(&self, geom: Geometry) -> DenseField {
        let mut vectors = vec![[0.0f32; 3]; geom.voxel_count()];
        for z in 0..geom.dims[2] {
            for y in 0..geom.dims[1] {
                for x in 0..geom.dims[0] {
                    let p = geom.position(x, y, z);
                    let u = self.sample(self.geom.world_to_voxel(p));
                    vectors[geom.index(x, y, z)] = [u[0] as f32, u[1] as f32, u[2] as f32];
                }
            }
        }
        DenseField { geom, vectors }
    }
}

/// Cubic B-spline basis functions; weights sum to 1 for any t in [0, 1).
#[inline]
pub fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - t).powi(3) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Densifies per-node displacements into a dense field by cubic B-spline
/// tensor-product interpolation on the target geometry.
pub fn densify(grid: &ControlGrid, node_disp: &[[f64; 3]], geom: &Geometry) -> DenseField {
    assert_eq!(node_disp.len(), grid.num_nodes());
    let [gx, gy, gz] = grid.grid_dims;
    let mut vectors = vec![[0.0f32; 3]; geom.voxel_count()];
    let clamp = |i: i64, n: usize| -> usize { i.clamp(0, n as i64 - 1) as usize };
    for z in 0..geom.dims[2] {
        let pz = geom.origin[2] + z as f64 * geom.spacing[2];
        let uz = (pz - grid.origin_mm[2]) / grid.spacing_mm;
        let kz = uz.floor();
        let wz = bspline_weights(uz - kz);
        for y in 0..geom.dims[1] {
            let py = geom.origin[1] + y as f64 * geom.spacing[1];
            let uy = (py - grid.origin_mm[1]) / grid.spacing_mm;
            let ky = uy.floor();
            let wy = bspline_weights(uy - ky);
            for x in 0..geom.dims[0] {
                let px = geom.origin[0] + x as f64 * geom.spacing[0];
                let ux = (px - grid.origin_mm[0]) / grid.spacing_mm;
                let kx = ux.floor();
                let wx = bspline_weights(ux - kx);
                let mut acc = [0.0f64; 3];
                for (c, &wc) in wz.iter().enumerate() {
                    let nk = clamp(kz as i64 - 1 + c as i64, gz);
                    for (b, &wb) in wy.iter().enumerate() {
                        let nj = clamp(ky as i64 - 1 + b as i64, gy);
                        let row = gx * (nj + gy * nk);
                        for (a, &wa) in wx.iter().enumerate() {
                            let ni = clamp(kx as i64 - 1 + a as i64, gx);
                            let w = wa * wb * wc;
                            let d = node_disp[ni + row];
                            acc[0] += w * d[0];
                            acc[1] += w * d[1];
                            acc[2] += w * d[2];
                        }
                    }
                }
                vectors[geom.index(x, y, z)] = [acc[0] as f32, acc[1] as f32, acc[2] as f32];
            }
        }
    }
    DenseField {
        geom: *geom,
        vectors,
    }
}

/// Composes two fields: result(x) = inner(x) + outer(x + inner(x)).
pub fn compose(outer: &DenseField, inner: &DenseField) -> Result<DenseField> {
    if !outer.geom.matches(&inner.geom) {
        return Err(Error::GeometryMismatch(
            "compose requires fields on the same geometry".into(),
        ));
    }
    let geom = inner.geom;
    let mut vectors = vec![[0.0f32; 3]; geom.voxel_count()];
    for z in 0..geom.dims[2] {
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let idx = geom.index(x, y, z);
                let ui = inner.vectors[idx];
                let p = geom.position(x, y, z);
                let q = [
                    p[0] + ui[0] as f64,
                    p[1] + ui[1] as f64,
                    p[2] + ui[2] as f64,
                ];
                let uo = outer.sample(geom.world_to_voxel(q));
                vectors[idx] = [
                    ui[0] + uo[0] as f32,
                    ui[1] + uo[1] as f32,
                    ui[2] + uo[2] as f32,
                ];
            }
        }
    }
    Ok(DenseField { geom, vectors })
}

/// Backward-warps an image: output(x) = src(x + u(x)), trilinear, clamped.
pub fn warp_image(src: &Volume, field: &DenseField) -> Volume {
    let geom = field.geom;
    let mut voxels = vec![0.0f32; geom.voxel_count()];
    for z in 0..geom.dims[2] {
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let idx = geom.index(x, y, z);
                let u = field.vectors[idx];
                let p = geom.position(x, y, z);
                let q = [
                    p[0] + u[0] as f64,
                    p[1] + u[1] as f64,
                    p[2] + u[2] as f64,
                ];
                voxels[idx] = src.sample_trilinear(src.geom.world_to_voxel(q)) as f32;
            }
        }
    }
    Volume { geom, voxels }
}

/// Backward-warps a mask with nearest-neighbor sampling.
pub fn warp_mask(src: &SegMask, field: &DenseField) -> SegMask {
    let geom = field.geom;
    let mut labels = vec![0u8; geom.voxel_count()];
    for z in 0..geom.dims[2] {
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let idx = geom.index(x, y, z);
                let u = field.vectors[idx];
                let p = geom.position(x, y, z);
                let q = [
                    p[0] + u[0] as f64,
                    p[1] + u[1] as f64,
                    p[2] + u[2] as f64,
                ];
                let [nx, ny, nz] = src.geom.nearest_voxel(q);
                labels[idx] = src.at(nx, ny, nz);
            }
        }
    }
    SegMask { geom, labels }
}
