//! Pyramidal registration driver: coarse-to-fine image levels, per-level
//! refinement steps with shrinking displacement steps, unary tables rebuilt
//! against the current warped source, and true field composition.

use serde::{Deserialize, Serialize};

use crate::deform::{
    build_grid, build_label_set, compose, densify, warp_image, warp_mask, DeformationLabeling,
    DenseField,
};
use crate::error::{Error, Result};
use crate::metrics::{build_unary_table, half_extent_for_spacing, FeatureParams, MetricKind};
use crate::solver::{
    combine_unaries_per_class, combine_unaries_single, DominantClassMode, EnergyModel,
    WeightMatrix, WeightVector,
};
use crate::volume::{ClassSet, SegMask, Volume};

/// Registration protocol parameters; the defaults reproduce the reference
/// protocol (2 pyramid levels, 5 refinement steps, 125 labels, 25 mm grid).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegParams {
    pub pyramid_levels: usize,
    pub refine_steps: usize,
    pub labels_per_axis: usize,
    pub grid_spacing_mm: f64,
    /// First-step displacement bound as a fraction of the grid spacing.
    pub max_step_frac: f64,
    /// Per-step shrink factor of the displacement bound.
    pub step_shrink: f64,
    pub metrics: Vec<MetricKind>,
    pub mi_bins: usize,
    /// Below this labeling count the solver enumerates exactly.
    pub exact_cap: f64,
    pub dominant_class_mode: DominantClassMode,
    /// Smoothness-to-unary ratio of the prediction energy. Per-class weights
    /// scale this by their mean column norm so the learned matrix runs at the
    /// same relative smoothing as a unit-weight single metric.
    pub pairwise_ratio: f64,
}

impl Default for RegParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 2,
            refine_steps: 5,
            labels_per_axis: 5,
            grid_spacing_mm: 25.0,
            max_step_frac: 0.4,
            step_shrink: 0.67,
            metrics: MetricKind::ALL.to_vec(),
            mi_bins: 16,
            exact_cap: 2e4,
            dominant_class_mode: DominantClassMode::Displaced,
            pairwise_ratio: 0.05,
        }
    }
}

impl RegParams {
    pub fn num_labels(&self) -> usize {
        self.labels_per_axis.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 || self.refine_steps == 0 {
            return Err(Error::InvalidConfig(
                "need at least one level and one step".into(),
            ));
        }
        if self.labels_per_axis % 2 == 0 {
            return Err(Error::InvalidConfig("labels per axis must be odd".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::InvalidConfig("need at least one metric".into()));
        }
        if !(self.grid_spacing_mm > 0.0) || !(self.max_step_frac > 0.0) {
            return Err(Error::InvalidConfig("spacing and step must be positive".into()));
        }
        Ok(())
    }
}

/// Weights used by the driver: a per-class matrix (requires a source mask)
/// or a single vector applied everywhere.
#[derive(Debug, Clone)]
pub enum Weights {
    PerClass {
        matrix: WeightMatrix,
        classes: ClassSet,
    },
    Uniform(WeightVector),
}

/// Per-solve trace record for debugging and monotonicity checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub level: usize,
    pub step: usize,
    /// Energy after init and each accepted move within the solve.
    pub energies: Vec<f64>,
}

#[derive(Debug)]
pub struct Registration {
    pub field: DenseField,
    pub labelings: Vec<DeformationLabeling>,
    pub trace: Vec<StepTrace>,
}

impl Registration {
    /// Serializes the energy trace as JSON for inspection.
    pub fn trace_json(&self) -> String {
        serde_json::to_string_pretty(&self.trace).expect("trace serializes")
    }
}

/// Runs the full pyramidal registration of `source` onto `target`.
///
/// Per-class weights pick their column through the dominant class of the
/// (warped) source mask patch; a uniform weight vector needs no mask.
pub fn register(
    source: &Volume,
    target: &Volume,
    source_mask: Option<&SegMask>,
    weights: &Weights,
    params: &RegParams,
) -> Result<Registration> {
    params.validate()?;
    if !source.geom.matches(&target.geom) {
        return Err(Error::GeometryMismatch(
            "source and target must share a geometry".into(),
        ));
    }
    if let Some(m) = source_mask {
        if !m.geom.matches(&source.geom) {
            return Err(Error::GeometryMismatch(
                "source mask must match the source geometry".into(),
            ));
        }
    }
    if matches!(weights, Weights::PerClass { .. }) && source_mask.is_none() {
        return Err(Error::InvalidConfig(
            "multi-metric mode requires source segmentation".into(),
        ));
    }

    let mut field: Option<DenseField> = None;
    let mut labelings = Vec::new();
    let mut trace = Vec::new();

    for level in (0..params.pyramid_levels).rev() {
        let factor = 1usize << level;
        let src_l = source.downsample(factor)?;
        let tgt_l = target.downsample(factor)?;
        let mask_l = match source_mask {
            Some(m) => Some(m.downsample(factor)?),
            None => None,
        };
        let geom = tgt_l.geom;

        // carry the running field to this level's geometry
        let mut level_field = match field.take() {
            Some(f) => f.resample(geom),
            None => DenseField::zeros(geom),
        };

        let grid = build_grid(&geom, params.grid_spacing_mm)?;
        let half_extent = half_extent_for_spacing(params.grid_spacing_mm, geom.spacing);
        let feature_params = FeatureParams {
            patch_half_extent: half_extent,
            mi_bins: params.mi_bins,
            normalize: true,
        };

        for step in 0..params.refine_steps {
            let max_step = params.max_step_frac
                * params.grid_spacing_mm
                * params.step_shrink.powi(step as i32);
            let labels = build_label_set(max_step, params.labels_per_axis)?;

            let warped_src = warp_image(&src_l, &level_field);
            let table = build_unary_table(
                &warped_src,
                &tgt_l,
                &grid,
                &labels,
                &params.metrics,
                &feature_params,
            );
            let (unary, pairwise_weight) = match weights {
                Weights::Uniform(w) => (combine_unaries_single(&table, w)?, w.pairwise_weight),
                Weights::PerClass { matrix, classes } => {
                    let mask = mask_l.as_ref().expect("checked above");
                    let warped_mask = warp_mask(mask, &level_field);
                    let unary = combine_unaries_per_class(
                        &table,
                        matrix,
                        &warped_mask,
                        classes,
                        &grid,
                        &labels,
                        half_extent,
                        params.dominant_class_mode,
                    )?;
                    (unary, params.pairwise_ratio * matrix.mean_column_norm())
                }
            };
            let model = EnergyModel::new(
                unary,
                labels.len(),
                pairwise_weight,
                grid.edges.clone(),
                &labels,
            )?;
            let init = DeformationLabeling::zeros(&grid, &labels);
            let solved = crate::solver::solve_multi_init(&model, &[&init], params.exact_cap)?;

            let step_field = densify(&grid, &solved.labeling.node_displacements(&labels), &geom);
            level_field = compose(&level_field, &step_field)?;
            trace.push(StepTrace {
                level,
                step,
                energies: solved.trace,
            });
            labelings.push(solved.labeling);
        }
        field = Some(level_field);
    }

    Ok(Registration {
        field: field.expect("at least one level"),
        labelings,
        trace,
    })
}

/// Uniform single-metric weights: weight 1 on `metric`, the given smoothness.
pub fn single_metric_weights(metric: MetricKind, pairwise_weight: f64) -> (Weights, Vec<MetricKind>) {
    (
        Weights::Uniform(WeightVector {
            metric_weights: vec![1.0],
            pairwise_weight,
        }),
        vec![metric],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured_volume(g: Geometry, seed: u64) -> Volume {
        // smooth multi-frequency texture so SAD has informative gradients
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phases = [[0.0f64; 3]; 4];
        for p in &mut phases {
            for c in p.iter_mut() {
                *c = rng.gen_range(0.0..std::f64::consts::TAU);
            }
        }
        let mut voxels = Vec::with_capacity(g.voxel_count());
        for z in 0..g.dims[2] {
            for y in 0..g.dims[1] {
                for x in 0..g.dims[0] {
                    let p = g.position(x, y, z);
                    let mut v = 0.5;
                    for (k, ph) in phases.iter().enumerate() {
                        let f = 0.05 + 0.04 * k as f64;
                        v += 0.1
                            * (f * p[0] + ph[0]).sin()
                            * (f * p[1] + ph[1]).cos()
                            * (f * p[2] + ph[2]).sin();
                    }
                    voxels.push(v as f32);
                }
            }
        }
        Volume::new(g, voxels).unwrap()
    }

    fn small_params() -> RegParams {
        RegParams {
            pyramid_levels: 2,
            refine_steps: 3,
            labels_per_axis: 3,
            grid_spacing_mm: 12.0,
            ..Default::default()
        }
    }

    #[test]
    fn config_echo_defaults() {
        let p = RegParams::default();
        assert_eq!(p.pyramid_levels, 2);
        assert_eq!(p.refine_steps, 5);
        assert_eq!(p.num_labels(), 125);
        assert_eq!(p.grid_spacing_mm, 25.0);
    }

    #[test]
    fn self_registration_stays_put() {
        let g = Geometry::new([20, 20, 20], [2.0; 3], [0.0; 3]).unwrap();
        let v = textured_volume(g, 5);
        let (weights, metrics) = single_metric_weights(MetricKind::Sad, 0.05);
        let mut params = small_params();
        params.metrics = metrics;
        let reg = register(&v, &v, None, &weights, &params).unwrap();
        let mean = reg.field.mean_magnitude_vox();
        assert!(mean < 0.5, "mean displacement {mean} voxels");
    }

    #[test]
    fn translation_recovered() {
        let g = Geometry::new([20, 20, 20], [2.0; 3], [0.0; 3]).unwrap();
        let src = textured_volume(g, 6);
        // target(x) = src(x + t), t = 2 voxels in +x
        let t = [4.0f64, 0.0, 0.0];
        let shift = DenseField {
            geom: g,
            vectors: vec![[t[0] as f32, t[1] as f32, t[2] as f32]; g.voxel_count()],
        };
        let tgt = warp_image(&src, &shift);
        let (weights, metrics) = single_metric_weights(MetricKind::Sad, 0.05);
        let mut params = small_params();
        params.metrics = metrics;
        let reg = register(&src, &tgt, None, &weights, &params).unwrap();
        // mean error to the true translation, in voxels, over the interior
        let mut err = 0.0;
        let mut n = 0usize;
        for z in 3..17 {
            for y in 3..17 {
                for x in 3..17 {
                    let u = reg.field.at(x, y, z);
                    let e = ((u[0] as f64 - t[0]).powi(2)
                        + (u[1] as f64 - t[1]).powi(2)
                        + (u[2] as f64 - t[2]).powi(2))
                    .sqrt()
                        / 2.0;
                    err += e;
                    n += 1;
                }
            }
        }
        let mean = err / n as f64;
        assert!(mean < 0.5, "mean translation error {mean} voxels");
    }

    #[test]
    fn trace_is_monotone_within_each_solve() {
        let g = Geometry::new([16, 16, 16], [2.0; 3], [0.0; 3]).unwrap();
        let src = textured_volume(g, 7);
        let tgt = textured_volume(g, 8);
        let (weights, metrics) = single_metric_weights(MetricKind::Sad, 0.05);
        let mut params = small_params();
        params.metrics = metrics;
        let reg = register(&src, &tgt, None, &weights, &params).unwrap();
        assert_eq!(reg.trace.len(), params.pyramid_levels * params.refine_steps);
        for t in &reg.trace {
            for w in t.energies.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }

    #[test]
    fn per_class_mode_requires_mask() {
        let g = Geometry::new([10, 10, 10], [2.0; 3], [0.0; 3]).unwrap();
        let v = textured_volume(g, 9);
        let weights = Weights::PerClass {
            matrix: WeightMatrix {
                columns: vec![WeightVector::new(vec![1.0; 4], 0.1).unwrap()],
            },
            classes: ClassSet::from_names(&["bg"]),
        };
        let err = register(&v, &v, None, &weights, &small_params());
        assert!(matches!(err, Err(Error::InvalidConfig(msg)) if msg.contains("source segmentation")));
    }
}
