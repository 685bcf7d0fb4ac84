//! 3D intensity volumes and segmentation masks with physical geometry.
//!
//! Voxels are stored x-fastest; positions are voxel centers in millimetres.
//! Volumes and masks are immutable after construction and safe to share
//! across parallel workers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel lattice geometry: counts, spacing (mm/voxel) and origin (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "non-positive spacing in {spacing:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat index of voxel (x, y, z); x varies fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// World position (mm) of a voxel center.
    #[inline]
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a world position.
    #[inline]
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Nearest voxel to a world position, clamped to the lattice.
    #[inline]
    pub fn nearest_voxel(&self, p: [f64; 3]) -> [usize; 3] {
        let v = self.world_to_voxel(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = v[a].round();
            out[a] = if r <= 0.0 {
                0
            } else {
                (r as usize).min(self.dims[a] - 1)
            };
        }
        out
    }

    /// Physical extent (mm) spanned by voxel centers: (dim-1) * spacing.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    pub fn matches(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() < 1e-9
                    && (self.origin[a] - other.origin[a]).abs() < 1e-9
            })
    }
}

/// 3D scalar intensity grid, 32-bit reals, x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geom: Geometry,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, voxels: Vec<f32>) -> Result<Self> {
        if voxels.len() != geom.voxel_count() {
            return Err(Error::PayloadMismatch {
                expected: geom.voxel_count(),
                found: voxels.len(),
            });
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { geom, voxels })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.geom.index(x, y, z)]
    }

    /// Trilinear sample at continuous voxel coordinates, clamped to borders.
    pub fn sample_trilinear(&self, v: [f64; 3]) -> f64 {
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
        let mut acc = 0.0;
        for (dz, wz) in [(i0[2], 1.0 - t[2]), (i1[2], t[2])] {
            for (dy, wy) in [(i0[1], 1.0 - t[1]), (i1[1], t[1])] {
                for (dx, wx) in [(i0[0], 1.0 - t[0]), (i1[0], t[0])] {
                    acc += wx * wy * wz * self.voxels[self.geom.index(dx, dy, dz)] as f64;
                }
            }
        }
        acc
    }

    /// Per-volume min-max normalization to [0, 1]; flat volumes map to zeros.
    pub fn normalized(&self) -> Volume {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.voxels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        let voxels = if range > 1e-12 {
            self.voxels.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.voxels.len()]
        };
        Volume {
            geom: self.geom,
            voxels,
        }
    }

    /// Block-mean downsampling; partial border blocks average present voxels.
    pub fn downsample(&self, factor: usize) -> Result<Volume> {
        if factor == 0 {
            return Err(Error::InvalidConfig("downsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (geom, blocks) = block_layout(&self.geom, factor);
        let mut voxels = vec![0.0f32; geom.voxel_count()];
        for (out_idx, block) in blocks.iter().enumerate() {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for z in block.z0..block.z1 {
                for y in block.y0..block.y1 {
                    for x in block.x0..block.x1 {
                        sum += self.voxels[self.geom.index(x, y, z)] as f64;
                        n += 1;
                    }
                }
            }
            voxels[out_idx] = (sum / n as f64) as f32;
        }
        Ok(Volume { geom, voxels })
    }
}

/// Segmentation mask on the same lattice as its paired volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub geom: Geometry,
    pub labels: Vec<u8>,
}

impl SegMask {
    pub fn new(geom: Geometry, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != geom.voxel_count() {
            return Err(Error::PayloadMismatch {
                expected: geom.voxel_count(),
                found: labels.len(),
            });
        }
        Ok(Self { geom, labels })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.geom.index(x, y, z)]
    }

    /// Voxel count of class `c`.
    pub fn class_count(&self, c: u8) -> usize {
        self.labels.iter().filter(|&&l| l == c).count()
    }

    pub fn validate_against(&self, classes: &ClassSet) -> Result<()> {
        for (i, &l) in self.labels.iter().enumerate() {
            if !classes.contains(l) {
                return Err(Error::InvalidConfig(format!(
                    "label {l} at voxel {i} not in class set"
                )));
            }
        }
        Ok(())
    }

    /// Majority-vote downsampling; ties resolve to the lowest class id.
    pub fn downsample(&self, factor: usize) -> Result<SegMask> {
        if factor == 0 {
            return Err(Error::InvalidConfig("downsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (geom, blocks) = block_layout(&self.geom, factor);
        let mut labels = vec![0u8; geom.voxel_count()];
        let mut counts = [0u32; 256];
        for (out_idx, block) in blocks.iter().enumerate() {
            counts.fill(0);
            for z in block.z0..block.z1 {
                for y in block.y0..block.y1 {
                    for x in block.x0..block.x1 {
                        counts[self.labels[self.geom.index(x, y, z)] as usize] += 1;
                    }
                }
            }
            let mut best = 0usize;
            for c in 1..256 {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            labels[out_idx] = best as u8;
        }
        Ok(SegMask { geom, labels })
    }
}

struct Block {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    z0: usize,
    z1: usize,
}

fn block_layout(geom: &Geometry, factor: usize) -> (Geometry, Vec<Block>) {
    let dims = [
        geom.dims[0].div_ceil(factor),
        geom.dims[1].div_ceil(factor),
        geom.dims[2].div_ceil(factor),
    ];
    let out = Geometry {
        dims,
        spacing: [
            geom.spacing[0] * factor as f64,
            geom.spacing[1] * factor as f64,
            geom.spacing[2] * factor as f64,
        ],
        origin: geom.origin,
    };
    let mut blocks = Vec::with_capacity(out.voxel_count());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                blocks.push(Block {
                    x0: x * factor,
                    x1: ((x + 1) * factor).min(geom.dims[0]),
                    y0: y * factor,
                    y1: ((y + 1) * factor).min(geom.dims[1]),
                    z0: z * factor,
                    z1: ((z + 1) * factor).min(geom.dims[2]),
                });
            }
        }
    }
    (out, blocks)
}

/// Ordered set of anatomical classes; id 0 is reserved for background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSet {
    pub classes: Vec<(u8, String)>,
}

impl ClassSet {
    /// Builds a class set from names; ids are assigned contiguously from 0.
    pub fn from_names(names: &[&str]) -> Self {
        Self {
            classes: names
                .iter()
                .enumerate()
                .map(|(i, n)| (i as u8, n.to_string()))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (id, _)) in self.classes.iter().enumerate() {
            if *id as usize != i {
                return Err(Error::InvalidConfig(format!(
                    "class ids must be contiguous from 0, found {id} at slot {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, id: u8) -> bool {
        (id as usize) < self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Class ids excluding background.
    pub fn foreground_ids(&self) -> Vec<u8> {
        self.classes.iter().map(|(id, _)| *id).filter(|&id| id != 0).collect()
    }
}
