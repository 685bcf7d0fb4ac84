//! Run configuration shared by the CLI commands. Defaults reproduce the
//! reference protocol: 2 pyramid levels, 5 refinement steps per level,
//! 125 labels, 25 mm control spacing, w0 = (0.1, 10, 10, 10).

use serde::{Deserialize, Serialize};

use metreg_core::lssvm::Hyperparams;
use metreg_core::metrics::MetricKind;
use metreg_core::register::RegParams;
use metreg_core::solver::{DominantClassMode, WeightVector};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub pyramid_levels: usize,
    pub refine_steps: usize,
    pub labels_per_axis: usize,
    pub grid_spacing_mm: f64,
    pub max_step_frac: f64,
    pub step_shrink: f64,
    pub metrics: Vec<MetricKind>,
    pub mi_bins: usize,
    pub exact_cap: f64,
    pub dominant_class_mode: DominantClassMode,
    /// Prediction smoothness-to-unary ratio for learned weight matrices.
    pub pairwise_ratio: f64,
    /// Smoothness weight used by single-metric registration.
    pub single_metric_pairwise: f64,
    pub hyperparams: HyperConfig,
    pub seed: u64,
    /// 0 keeps the default rayon pool size.
    pub threads: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub c: f64,
    pub alpha: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub w0_metrics: Vec<f64>,
    pub w0_pairwise: f64,
    pub cut_tol: f64,
    pub qp_tol: f64,
    pub max_outer: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        let hp = Hyperparams::default();
        Self {
            c: hp.c,
            alpha: hp.alpha,
            eta: hp.eta,
            epsilon: hp.epsilon,
            w0_metrics: hp.w0.metric_weights,
            w0_pairwise: hp.w0.pairwise_weight,
            cut_tol: hp.cut_tol,
            qp_tol: hp.qp_tol,
            max_outer: hp.max_outer,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let reg = RegParams::default();
        Self {
            pyramid_levels: reg.pyramid_levels,
            refine_steps: reg.refine_steps,
            labels_per_axis: reg.labels_per_axis,
            grid_spacing_mm: reg.grid_spacing_mm,
            max_step_frac: reg.max_step_frac,
            step_shrink: reg.step_shrink,
            metrics: reg.metrics,
            mi_bins: reg.mi_bins,
            exact_cap: reg.exact_cap,
            dominant_class_mode: reg.dominant_class_mode,
            pairwise_ratio: reg.pairwise_ratio,
            single_metric_pairwise: 0.05,
            hyperparams: HyperConfig::default(),
            seed: 0,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&std::path::Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                Ok(serde_json::from_str(&text)?)
            }
            None => Ok(Self::default()),
        }
    }

    pub fn reg_params(&self) -> RegParams {
        RegParams {
            pyramid_levels: self.pyramid_levels,
            refine_steps: self.refine_steps,
            labels_per_axis: self.labels_per_axis,
            grid_spacing_mm: self.grid_spacing_mm,
            max_step_frac: self.max_step_frac,
            step_shrink: self.step_shrink,
            metrics: self.metrics.clone(),
            mi_bins: self.mi_bins,
            exact_cap: self.exact_cap,
            dominant_class_mode: self.dominant_class_mode,
            pairwise_ratio: self.pairwise_ratio,
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        let h = &self.hyperparams;
        Hyperparams {
            c: h.c,
            alpha: h.alpha,
            eta: h.eta,
            epsilon: h.epsilon,
            w0: WeightVector {
                metric_weights: h.w0_metrics.clone(),
                pairwise_weight: h.w0_pairwise,
            },
            cut_tol: h.cut_tol,
            qp_tol: h.qp_tol,
            max_outer: h.max_outer,
            ..Hyperparams::default()
        }
    }

    pub fn init_threads(&self) {
        if self.threads > 0 {
            // ignore the error if a pool already exists (tests, repeat calls)
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build_global();
        }
    }
}
