//! Dataset synthesis specs, on-disk manifests, and sample loading.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use metreg_core::io;
use metreg_core::lssvm::TrainSample;
use metreg_core::phantom::{generate, Ellipsoid, IntensityTransform, PhantomSpec};
use metreg_core::volume::ClassSet;

use crate::util::write_atomic;

/// Spec file consumed by `metreg synth`: how many pairs to draw and how the
/// phantom classes behave.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetSpec {
    pub seed: u64,
    pub num_samples: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub classes: Vec<ClassSpec>,
    pub deform_magnitude_mm: f64,
    pub noise_sigma: f64,
    #[serde(default = "default_deform_grid")]
    pub deform_grid_mm: f64,
    /// Optional explicit structure template; auto-placed per class when absent.
    #[serde(default)]
    pub structures: Option<Vec<Ellipsoid>>,
    #[serde(default = "default_jitter")]
    pub jitter_mm: f64,
}

fn default_deform_grid() -> f64 {
    25.0
}

fn default_jitter() -> f64 {
    4.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: u8,
    pub name: String,
    pub transform: IntensityTransform,
}

impl SetSpec {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.num_samples == 0 {
            anyhow::bail!("field num_samples: must be >= 1");
        }
        if self.classes.is_empty() {
            anyhow::bail!("field classes: need at least one foreground class");
        }
        for c in &self.classes {
            if c.id == 0 {
                anyhow::bail!("field classes: id 0 is reserved for background");
            }
        }
        let mut ids: Vec<u8> = self.classes.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.classes.len() {
            anyhow::bail!("field classes: duplicate class ids");
        }
        if self.deform_magnitude_mm >= 0.4 * self.deform_grid_mm {
            anyhow::bail!(
                "field deform_magnitude_mm: must stay below 0.4 x deform_grid_mm ({})",
                0.4 * self.deform_grid_mm
            );
        }
        Ok(())
    }

    pub fn class_set(&self) -> ClassSet {
        let mut classes = vec![(0u8, "background".to_string())];
        let mut sorted = self.classes.clone();
        sorted.sort_by_key(|c| c.id);
        for c in &sorted {
            classes.push((c.id, c.name.clone()));
        }
        ClassSet { classes }
    }

    fn extent(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    /// Template structures: explicit ones, or an auto layout. With three or
    /// more classes the second class forms a core wrapped by a shell of the
    /// last class (earlier structures win overlaps), so the core boundary
    /// depends on cross-class appearance; the first class and any others get
    /// free-standing blobs of their own.
    fn template(&self) -> Vec<Ellipsoid> {
        if let Some(s) = &self.structures {
            return s.clone();
        }
        const ANCHORS: [[f64; 3]; 4] = [
            [0.34, 0.36, 0.48],
            [0.75, 0.64, 0.52],
            [0.72, 0.26, 0.45],
            [0.30, 0.78, 0.55],
        ];
        let ext = self.extent();
        let rmin = ext[0].min(ext[1]).min(ext[2]);
        let anchor = |k: usize| -> [f64; 3] {
            let a = ANCHORS[k % ANCHORS.len()];
            [a[0] * ext[0], a[1] * ext[1], a[2] * ext[2]]
        };
        let n = self.classes.len();
        if n < 3 {
            return self
                .classes
                .iter()
                .enumerate()
                .map(|(i, c)| Ellipsoid {
                    center_mm: anchor(i),
                    radii_mm: [rmin * 0.17, rmin * 0.15, rmin * 0.16],
                    class: c.id,
                })
                .collect();
        }
        let mut out = vec![
            // core of the second class, wrapped by the shell below
            Ellipsoid {
                center_mm: anchor(0),
                radii_mm: [rmin * 0.12, rmin * 0.11, rmin * 0.12],
                class: self.classes[1].id,
            },
            // large free-standing blob of the first class
            Ellipsoid {
                center_mm: anchor(1),
                radii_mm: [rmin * 0.24, rmin * 0.20, rmin * 0.22],
                class: self.classes[0].id,
            },
        ];
        for (i, c) in self.classes.iter().enumerate().skip(2) {
            if i == n - 1 {
                out.push(Ellipsoid {
                    center_mm: anchor(0),
                    radii_mm: [rmin * 0.25, rmin * 0.22, rmin * 0.24],
                    class: c.id,
                });
            } else {
                out.push(Ellipsoid {
                    center_mm: anchor(i + 1),
                    radii_mm: [rmin * 0.17, rmin * 0.15, rmin * 0.16],
                    class: c.id,
                });
            }
        }
        out
    }

    /// Derives the per-sample phantom spec: jittered structures, a fresh seed.
    pub fn sample_spec(&self, index: usize) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e37_79b9 + index as u64));
        let structures = self
            .template()
            .into_iter()
            .map(|mut e| {
                for a in 0..3 {
                    e.center_mm[a] += rng.gen_range(-self.jitter_mm..=self.jitter_mm);
                    e.radii_mm[a] *= rng.gen_range(0.85..1.15);
                }
                e
            })
            .collect();
        PhantomSpec {
            seed: rng.gen(),
            dims: self.dims,
            spacing: self.spacing,
            structures,
            transforms: self.classes.iter().map(|c| (c.id, c.transform)).collect(),
            deform_magnitude_mm: self.deform_magnitude_mm,
            noise_sigma: self.noise_sigma,
            deform_grid_mm: self.deform_grid_mm,
        }
    }
}

/// On-disk dataset manifest: class set plus per-pair file names (relative to
/// the manifest directory).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub classes: ClassSet,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub target: String,
    pub source_mask: String,
    pub target_mask: String,
    pub truth_field: String,
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read manifest {}: {e}", path.display()))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let dir = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((manifest, dir))
    }

    pub fn load_sample(&self, dir: &Path, entry: &ManifestEntry) -> anyhow::Result<TrainSample> {
        let vol = |name: &str| -> anyhow::Result<metreg_core::Volume> {
            Ok(io::load_native(&dir.join(name))?.into_volume()?)
        };
        let mask = |name: &str| -> anyhow::Result<metreg_core::SegMask> {
            Ok(io::load_native(&dir.join(name))?.into_mask()?)
        };
        Ok(TrainSample {
            source: vol(&entry.source)?,
            target: vol(&entry.target)?,
            source_mask: mask(&entry.source_mask)?,
            target_mask: mask(&entry.target_mask)?,
        })
    }
}

/// Generates the dataset and writes `.vvol` files plus `manifest.json`.
pub fn synthesize(spec: &SetSpec, out_dir: &Path) -> anyhow::Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for i in 0..spec.num_samples {
        let pspec = spec.sample_spec(i);
        let phantom = generate(&pspec)?;
        let id = format!("pair_{i:03}");
        let entry = ManifestEntry {
            id: id.clone(),
            source: format!("{id}_source.vvol"),
            target: format!("{id}_target.vvol"),
            source_mask: format!("{id}_source_mask.vvol"),
            target_mask: format!("{id}_target_mask.vvol"),
            truth_field: format!("{id}_truth.vvol"),
        };
        io::save_volume(&out_dir.join(&entry.source), &phantom.sample.source)?;
        io::save_volume(&out_dir.join(&entry.target), &phantom.sample.target)?;
        io::save_mask(&out_dir.join(&entry.source_mask), &phantom.sample.source_mask)?;
        io::save_mask(&out_dir.join(&entry.target_mask), &phantom.sample.target_mask)?;
        io::save_field(&out_dir.join(&entry.truth_field), &phantom.truth_field)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        seed: spec.seed,
        classes: spec.class_set(),
        samples: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&out_dir.join("manifest.json"), json.as_bytes())?;
    Ok(manifest)
}
