//! Synthetic training/test data: ellipsoid segmentations, textured
//! renderings with per-class intensity relationships, and smooth random
//! ground-truth deformations. Deterministic under the spec seed.
//!
//! Per-class transform tags control which metric is informative for that
//! class: `linear` keeps intensities (SAD and NCC sharp), `gamma` and
//! `noisy-monotone` warp them nonlinearly (MI territory), `inverted` flips
//! them so absolute-difference metrics actively mislead while MI still works.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{build_grid, densify, warp_image, warp_mask, DenseField};
use crate::error::{Error, Result};
use crate::lssvm::TrainSample;
use crate::volume::{Geometry, SegMask, Volume};

/// Per-class intensity relationship between the two images of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntensityTransform {
    Linear,
    Gamma,
    Inverted,
    NoisyMonotone,
}

impl IntensityTransform {
    fn remap(&self, v: f64) -> f64 {
        match self {
            IntensityTransform::Linear => v,
            IntensityTransform::Gamma => v.clamp(0.0, 1.0).powf(4.0),
            IntensityTransform::Inverted => 1.0 - v,
            IntensityTransform::NoisyMonotone => {
                let s = v.clamp(0.0, 1.0);
                s * s * (3.0 - 2.0 * s)
            }
        }
    }

    /// Acquisition-noise factor per transform tag: linear channels are
    /// clean, remapped ones noisier.
    fn noise_factor(&self) -> f64 {
        match self {
            IntensityTransform::Linear => 0.25,
            IntensityTransform::Gamma => 1.0,
            IntensityTransform::Inverted => 1.25,
            IntensityTransform::NoisyMonotone => 3.0,
        }
    }

    fn apply(&self, v: f64, rng: &mut ChaCha8Rng, noise_sigma: f64) -> f64 {
        self.remap(v) + gaussian(rng) * noise_sigma * self.noise_factor()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// One ellipsoidal structure of the phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub radii_mm: [f64; 3],
    pub class: u8,
}

/// Full description of one synthetic sample pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub structures: Vec<Ellipsoid>,
    /// transform tag per class id; classes without an entry default to linear
    pub transforms: Vec<(u8, IntensityTransform)>,
    pub deform_magnitude_mm: f64,
    pub noise_sigma: f64,
    /// control spacing of the random ground-truth field
    pub deform_grid_mm: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])?;
        if self.structures.is_empty() {
            return Err(Error::InvalidConfig("phantom needs at least one structure".into()));
        }
        for s in &self.structures {
            if s.radii_mm.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::InvalidConfig(format!(
                    "degenerate ellipsoid radii {:?}",
                    s.radii_mm
                )));
            }
            if s.class == 0 {
                return Err(Error::InvalidConfig(
                    "structures must use foreground classes (id > 0)".into(),
                ));
            }
        }
        if self.deform_magnitude_mm < 0.0 {
            return Err(Error::InvalidConfig("deformation magnitude must be >= 0".into()));
        }
        if self.deform_magnitude_mm >= 0.4 * self.deform_grid_mm {
            return Err(Error::InvalidConfig(format!(
                "deformation magnitude {} must stay below 0.4 x control spacing {}",
                self.deform_magnitude_mm, self.deform_grid_mm
            )));
        }
        Ok(())
    }

    pub fn transform_of(&self, class: u8) -> IntensityTransform {
        self.transforms
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, t)| *t)
            .unwrap_or(IntensityTransform::Linear)
    }
}

/// A generated pair plus its ground-truth field.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub sample: TrainSample,
    pub truth_field: DenseField,
}

fn rasterize(geom: &Geometry, structures: &[Ellipsoid]) -> SegMask {
    let mut labels = vec![0u8; geom.voxel_count()];
    for z in 0..geom.dims[2] {
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let p = geom.position(x, y, z);
                for s in structures {
                    let mut q = 0.0;
                    for a in 0..3 {
                        let t = (p[a] - s.center_mm[a]) / s.radii_mm[a];
                        q += t * t;
                    }
                    if q <= 1.0 {
                        labels[geom.index(x, y, z)] = s.class;
                        break;
                    }
                }
            }
        }
    }
    SegMask {
        geom: *geom,
        labels,
    }
}

/// Multi-frequency smooth texture in [-1, 1], deterministic per rng state.
/// Wavelengths span 80 mm down to 10 mm so patches at the control-spacing
/// scale see informative detail.
fn texture_field(geom: &Geometry, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut waves = Vec::new();
    for (k, wavelength) in [80.0f64, 50.0, 30.0, 20.0, 14.0, 10.0].iter().enumerate() {
        let freq = std::f64::consts::TAU / wavelength;
        let dir: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2])
            .sqrt()
            .max(1e-9);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = if k < 3 { 0.45 } else { 0.35 };
        waves.push((
            [
                dir[0] / norm * freq,
                dir[1] / norm * freq,
                dir[2] / norm * freq,
            ],
            phase,
            amp,
        ));
    }
    let mut out = Vec::with_capacity(geom.voxel_count());
    for z in 0..geom.dims[2] {
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let p = geom.position(x, y, z);
                let mut v = 0.0;
                for (k, phase, amp) in &waves {
                    v += amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin();
                }
                out.push(v / 2.0);
            }
        }
    }
    out
}

/// Structures carry full-strength texture; the background keeps only a weak
/// remnant so registration has to localize each structure from its own
/// interior rather than riding on background detail. Class 1 renders at low
/// amplitude, below the MI histogram bin width, so intensity-quantizing
/// metrics lose it while correlation-based ones do not.
fn render(mask: &SegMask, texture: &[f64]) -> Volume {
    let class_base = |c: u8| -> f64 {
        match c {
            0 => 0.20,
            1 => 0.45,
            2 => 0.65,
            3 => 0.85,
            other => 0.25 + 0.1 * (other as f64 % 7.0),
        }
    };
    let voxels = mask
        .labels
        .iter()
        .zip(texture)
        .map(|(&c, &t)| {
            let amp = match c {
                0 => 0.5,
                1 => 0.13,
                _ => 1.0,
            };
            (class_base(c) + 0.16 * amp * t).clamp(0.01, 0.99) as f32
        })
        .collect();
    Volume {
        geom: mask.geom,
        voxels,
    }
}

/// Generates one sample pair.
///
/// The source mask comes from the ellipsoids, a smooth random B-spline field
/// is drawn and recorded as ground truth, the target mask is the source mask
/// warped by it, and intensities are rendered so the target follows each
/// class's transform of the (warped) source intensities.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomSample> {
    spec.validate()?;
    let geom = Geometry::new(spec.dims, spec.spacing, [0.0; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let source_mask = rasterize(&geom, &spec.structures);

    // ground-truth field from random control displacements
    let grid = build_grid(&geom, spec.deform_grid_mm)?;
    let disp: Vec<[f64; 3]> = (0..grid.num_nodes())
        .map(|_| {
            [
                rng.gen_range(-spec.deform_magnitude_mm..=spec.deform_magnitude_mm),
                rng.gen_range(-spec.deform_magnitude_mm..=spec.deform_magnitude_mm),
                rng.gen_range(-spec.deform_magnitude_mm..=spec.deform_magnitude_mm),
            ]
        })
        .collect();
    let truth_field = densify(&grid, &disp, &geom);

    let target_mask = warp_mask(&source_mask, &truth_field);

    let texture = texture_field(&geom, &mut rng);
    let source = render(&source_mask, &texture);

    // target intensities: per-class transform of the warped source image
    let warped_source = warp_image(&source, &truth_field);
    let mut voxels = Vec::with_capacity(geom.voxel_count());
    for (idx, &c) in target_mask.labels.iter().enumerate() {
        let t = spec.transform_of(c);
        // unstructured background stays noisy regardless of its transform
        let factor = if c == 0 { 1.25 } else { t.noise_factor() };
        let v = t.remap(warped_source.voxels[idx] as f64)
            + gaussian(&mut rng) * spec.noise_sigma * factor;
        voxels.push(v.clamp(0.0, 1.0) as f32);
    }
    let target = Volume { geom, voxels };

    Ok(PhantomSample {
        sample: TrainSample {
            source,
            target,
            source_mask,
            target_mask,
        },
        truth_field,
    })
}
