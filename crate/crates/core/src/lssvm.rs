//! Latent structured SVM training of per-class metric weights.
//!
//! The deformations aligning each training pair are unobserved; they are
//! imputed by loss-augmented registration, then a cutting-plane structured
//! SVM step updates the weights against the most violated deformations found
//! by loss-diminished registration. A CCCP outer loop alternates the two
//! until the surrogate objective stops decreasing.
//!
//! Training-time inference runs on a single grid at the sample resolution so
//! that the joint feature map corresponds to one labeling of one graph; the
//! full pyramid is used only at prediction.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{
    build_grid, build_label_set, ControlGrid, DeformationLabeling, DisplacementLabelSet,
};
use crate::dice::{build_loss_table, LossTable};
use crate::error::{Error, Result};
use crate::metrics::{build_unary_table, half_extent_for_spacing, FeatureParams, UnaryFeatureTable};
use crate::register::RegParams;
use crate::solver::{combine_unaries_single, solve_multi_init, EnergyModel, WeightMatrix, WeightVector};
use crate::volume::{SegMask, Volume};

/// One training pair: images as input, masks as (weak) output annotation.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub source: Volume,
    pub target: Volume,
    pub source_mask: SegMask,
    pub target_mask: SegMask,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        if !self.source.geom.matches(&self.target.geom)
            || !self.source.geom.matches(&self.source_mask.geom)
            || !self.source.geom.matches(&self.target_mask.geom)
        {
            return Err(Error::GeometryMismatch(
                "train sample volumes and masks must share a geometry".into(),
            ));
        }
        Ok(())
    }
}

/// Learning hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Regularization trade-off.
    pub c: f64,
    /// Proximity weight toward w0.
    pub alpha: f64,
    /// Loss-relaxation weight in the imputation objective.
    pub eta: f64,
    /// CCCP outer tolerance.
    pub epsilon: f64,
    /// Initial weights (metric weights + pairwise).
    pub w0: WeightVector,
    /// Constraint-violation threshold of the cutting plane.
    pub cut_tol: f64,
    /// Relative duality-gap tolerance of the inner QP solver.
    pub qp_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub qp_max_passes: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            c: 100.0,
            alpha: 1.0,
            eta: 40.0,
            epsilon: 1e-3,
            // hand-tuned defaults for (SAD, MI, NCC, DWT)
            w0: WeightVector {
                metric_weights: vec![0.1, 10.0, 10.0, 10.0],
                pairwise_weight: 0.1,
            },
            cut_tol: 1e-4,
            qp_tol: 1e-8,
            max_outer: 50,
            max_inner: 50,
            qp_max_passes: 5_000,
        }
    }
}

/// One margin constraint: the feature map of a violating deformation and its
/// loss.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub psi_bar: Vec<f64>,
    pub loss_bar: f64,
}

/// Per-sample constraint store plus the cached imputed feature map.
#[derive(Debug, Clone)]
pub struct WorkingSet {
    pub psi_hat: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

impl WorkingSet {
    /// Slack at `w`: max(0, max over stored constraints of the violation).
    pub fn slack(&self, w: &[f64]) -> f64 {
        let base = dot(w, &self.psi_hat);
        self.constraints
            .iter()
            .map(|c| base - dot(w, &c.psi_bar) + c.loss_bar)
            .fold(0.0, f64::max)
    }

    fn contains(&self, cand: &Constraint) -> bool {
        self.constraints.iter().any(|c| constraints_equal(c, cand))
    }
}

fn constraints_equal(a: &Constraint, b: &Constraint) -> bool {
    (a.loss_bar - b.loss_bar).abs() <= 1e-12
        && a.psi_bar
            .iter()
            .zip(&b.psi_bar)
            .all(|(x, y)| (x - y).abs() <= 1e-12)
}

/// Joint feature map: per-metric unary sums at the labeling, then the
/// unweighted L1 pairwise sum.
pub fn joint_feature_map(
    table: &UnaryFeatureTable,
    grid: &ControlGrid,
    labels: &DisplacementLabelSet,
    labeling: &DeformationLabeling,
) -> Vec<f64> {
    let m = table.num_metrics();
    let mut psi = vec![0.0f64; m + 1];
    for (node, &l) in labeling.labels.iter().enumerate() {
        let f = table.feature(node, l);
        for j in 0..m {
            psi[j] += f[j];
        }
    }
    let mut pair = 0.0;
    for &(i, j) in &grid.edges {
        pair += labels.l1(labeling.labels[i], labeling.labels[j]);
    }
    psi[m] = pair;
    psi
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Precomputed per-sample training state: grid, labels, feature and loss
/// tables. Tables depend only on the sample, so they are built once and
/// reused across all CCCP iterations.
#[derive(Debug)]
pub struct SampleContext {
    pub grid: ControlGrid,
    pub labels: DisplacementLabelSet,
    pub table: UnaryFeatureTable,
    pub loss: LossTable,
}

impl SampleContext {
    pub fn build(sample: &TrainSample, class: u8, reg: &RegParams) -> Result<Self> {
        sample.validate()?;
        let geom = sample.source.geom;
        let grid = build_grid(&geom, reg.grid_spacing_mm)?;
        let labels = build_label_set(
            reg.max_step_frac * reg.grid_spacing_mm,
            reg.labels_per_axis,
        )?;
        let params = FeatureParams {
            patch_half_extent: half_extent_for_spacing(reg.grid_spacing_mm, geom.spacing),
            mi_bins: reg.mi_bins,
            normalize: true,
        };
        let table = build_unary_table(
            &sample.source,
            &sample.target,
            &grid,
            &labels,
            &reg.metrics,
            &params,
        );
        let loss = build_loss_table(
            &sample.source_mask,
            &sample.target_mask,
            &grid,
            &labels,
            class,
        )?;
        Ok(Self {
            grid,
            labels,
            table,
            loss,
        })
    }

    pub fn psi(&self, labeling: &DeformationLabeling) -> Vec<f64> {
        joint_feature_map(&self.table, &self.grid, &self.labels, labeling)
    }

    /// Class-based energy w^T Psi(x, D) of a labeling.
    pub fn class_energy(&self, w: &WeightVector, labeling: &DeformationLabeling) -> f64 {
        dot(&w.to_concat(), &self.psi(labeling))
    }

    fn model_with_loss(&self, w: &WeightVector, loss_scale: f64) -> Result<EnergyModel> {
        let mut unary = combine_unaries_single(&self.table, w)?;
        if loss_scale != 0.0 {
            for node in 0..self.table.num_nodes {
                for l in 0..self.table.num_labels {
                    unary[node * self.table.num_labels + l] +=
                        loss_scale * self.loss.entry(node, l);
                }
            }
        }
        EnergyModel::new(
            unary,
            self.labels.len(),
            w.pairwise_weight,
            self.grid.edges.clone(),
            &self.labels,
        )
    }
}

/// Imputes the latent deformation: argmin of w^T Psi + eta * loss, solved as
/// a registration with loss-augmented unaries on the training grid.
pub fn impute_latent(
    ctx: &SampleContext,
    w: &WeightVector,
    eta: f64,
    exact_cap: f64,
) -> Result<DeformationLabeling> {
    let model = ctx.model_with_loss(w, eta)?;
    let init = DeformationLabeling::zeros(&ctx.grid, &ctx.labels);
    Ok(solve_multi_init(&model, &[&init], exact_cap)?.labeling)
}

/// Finds the most violated constraint: argmin of w^T Psi - loss, solved with
/// loss-diminished unaries. The imputed labeling, when given, seeds the
/// search so violations localize around it. Returns the labeling with its
/// feature map and exact surrogate loss.
pub fn most_violated(
    ctx: &SampleContext,
    w: &WeightVector,
    d_hat: Option<&DeformationLabeling>,
    exact_cap: f64,
) -> Result<(DeformationLabeling, Constraint)> {
    let model = ctx.model_with_loss(w, -1.0)?;
    let zeros = DeformationLabeling::zeros(&ctx.grid, &ctx.labels);
    let mut inits: Vec<&DeformationLabeling> = vec![&zeros];
    if let Some(h) = d_hat {
        inits.push(h);
    }
    let labeling = solve_multi_init(&model, &inits, exact_cap)?.labeling;
    let psi_bar = ctx.psi(&labeling);
    let loss_bar = ctx.loss.evaluate(&labeling);
    Ok((labeling, Constraint { psi_bar, loss_bar }))
}

/// Regularized working-set objective:
/// 0.5||w||^2 + alpha ||w - w0||^2 + (C/N) * sum_i slack_i(w).
pub fn ssvm_objective(w: &[f64], sets: &[WorkingSet], hp: &Hyperparams) -> f64 {
    let w0 = hp.w0.to_concat();
    let quad = 0.5 * dot(w, w)
        + hp.alpha
            * w.iter()
                .zip(&w0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
    let n = sets.len().max(1) as f64;
    let hinge: f64 = sets.iter().map(|s| s.slack(w)).sum();
    quad + (hp.c / n) * hinge
}

struct HingeTerm {
    /// psi_hat - psi_bar of the currently maximal constraint
    a: Vec<f64>,
    b: f64,
    value: f64,
}

fn max_violation(set: &WorkingSet, w: &[f64]) -> Option<HingeTerm> {
    let base = dot(w, &set.psi_hat);
    let mut best: Option<HingeTerm> = None;
    for c in &set.constraints {
        let v = base - dot(w, &c.psi_bar) + c.loss_bar;
        if best.as_ref().map_or(true, |h| v > h.value) {
            let a: Vec<f64> = set
                .psi_hat
                .iter()
                .zip(&c.psi_bar)
                .map(|(x, y)| x - y)
                .collect();
            best = Some(HingeTerm {
                a,
                b: c.loss_bar,
                value: v,
            });
        }
    }
    best
}

fn solve_linear(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    Some((0..n).map(|i| rhs[i] / m[i][i]).collect())
}

/// Active-set polish: reads off which hinge pieces and bounds are active at
/// `w_approx`, solves the resulting KKT system exactly, and verifies the
/// multipliers. Returns the exact minimizer when verification succeeds.
fn kkt_polish(
    w_approx: &[f64],
    sets: &[WorkingSet],
    hp: &Hyperparams,
    band: f64,
) -> Option<Vec<f64>> {
    let d = w_approx.len();
    let p = d - 1; // the bound-constrained pairwise coordinate
    let lambda = 1.0 + 2.0 * hp.alpha;
    let cn = hp.c / sets.len().max(1) as f64;
    let w0 = hp.w0.to_concat();

    // classify samples by their maximal violation at the approximate point
    let mut scale = 1.0f64;
    let terms: Vec<Option<HingeTerm>> = sets.iter().map(|s| max_violation(s, w_approx)).collect();
    for t in terms.iter().flatten() {
        scale = scale.max(t.value.abs());
    }
    let tol_v = band * scale;
    let mut fully_active = Vec::new();
    let mut free = Vec::new();
    for (i, t) in terms.iter().enumerate() {
        if let Some(h) = t {
            if h.value > tol_v {
                fully_active.push(i);
            } else if h.value >= -tol_v {
                free.push(i);
            }
        }
    }
    let bound_active = w_approx[p] < band;

    // w(x) = w_base + sum_f mu_f * w_dir_f + nu * nu_dir
    let mut w_base = vec![0.0f64; d];
    for k in 0..d {
        w_base[k] = 2.0 * hp.alpha * w0[k];
    }
    for &i in &fully_active {
        let a = &terms[i].as_ref().unwrap().a;
        for k in 0..d {
            w_base[k] -= cn * a[k];
        }
    }
    for v in w_base.iter_mut() {
        *v /= lambda;
    }
    let w_dirs: Vec<Vec<f64>> = free
        .iter()
        .map(|&i| {
            terms[i]
                .as_ref()
                .unwrap()
                .a
                .iter()
                .map(|&x| -cn * x / lambda)
                .collect()
        })
        .collect();
    let mut nu_dir = vec![0.0f64; d];
    nu_dir[p] = 1.0 / lambda;

    let n_unknowns = free.len() + bound_active as usize;
    let mut x = Vec::new();
    if n_unknowns > 0 {
        let mut mat = vec![vec![0.0f64; n_unknowns]; n_unknowns];
        let mut rhs = vec![0.0f64; n_unknowns];
        for (row, &i) in free.iter().enumerate() {
            let h = terms[i].as_ref().unwrap();
            for (col, dir) in w_dirs.iter().enumerate() {
                mat[row][col] = dot(&h.a, dir);
            }
            if bound_active {
                mat[row][free.len()] = dot(&h.a, &nu_dir);
            }
            rhs[row] = -(dot(&h.a, &w_base) + h.b);
        }
        if bound_active {
            let row = free.len();
            for (col, dir) in w_dirs.iter().enumerate() {
                mat[row][col] = dir[p];
            }
            mat[row][free.len()] = nu_dir[p];
            rhs[row] = -w_base[p];
        }
        x = solve_linear(mat, rhs)?;
    }

    // assemble and verify
    let mut w = w_base;
    for (f, dir) in w_dirs.iter().enumerate() {
        for k in 0..d {
            w[k] += x[f] * dir[k];
        }
    }
    let nu = if bound_active { x[free.len()] } else { 0.0 };
    if bound_active {
        for k in 0..d {
            w[k] += nu * nu_dir[k];
        }
        if nu < -1e-7 {
            return None;
        }
        w[p] = 0.0;
    }
    let mtol = 1e-7;
    for f in 0..free.len() {
        if x[f] < -mtol || x[f] > 1.0 + mtol {
            return None;
        }
    }
    if !bound_active && w[p] < -1e-9 {
        return None;
    }
    w[p] = w[p].max(0.0);
    // classification must still hold at the polished point
    let vtol = 1e-6 * scale.max(1.0);
    for (i, s) in sets.iter().enumerate() {
        let base = dot(&w, &s.psi_hat);
        let raw = s
            .constraints
            .iter()
            .map(|c| base - dot(&w, &c.psi_bar) + c.loss_bar)
            .fold(f64::NEG_INFINITY, f64::max);
        if fully_active.contains(&i) {
            let h = terms[i].as_ref().unwrap();
            let mine = dot(&w, &h.a) + h.b;
            // the hinge must still be active and its gradient still maximal
            if raw < -vtol || (raw - mine).abs() > vtol {
                return None;
            }
        } else if free.contains(&i) {
            let h = terms[i].as_ref().unwrap();
            let mine = dot(&w, &h.a) + h.b;
            if mine.abs() > vtol || raw > mine + vtol {
                return None;
            }
        } else if raw > vtol {
            return None;
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(w)
}

/// Minimizes the working-set objective subject to the pairwise weight bound
/// by exact coordinate ascent on the dual, with a duality-gap stopping rule
/// and an active-set KKT polish finisher.
///
/// Dual: one multiplier per stored constraint, blockwise simplex-bounded per
/// sample. The primal minimizer for fixed multipliers is the clamped scaled
/// residual w(lambda) = proj(c / (1+2a)) with c = 2a*w0 - (C/N) sum lambda*a,
/// so each coordinate update is an exact 1-D concave maximization.
pub fn ssvm_step(sets: &[WorkingSet], hp: &Hyperparams, warm: &[f64]) -> Result<Vec<f64>> {
    let d = warm.len();
    let p = d - 1;
    let lambda = 1.0 + 2.0 * hp.alpha;
    let cn = hp.c / sets.len().max(1) as f64;
    let w0 = hp.w0.to_concat();
    if w0.len() != d {
        return Err(Error::InvalidConfig("w0 dimension mismatch".into()));
    }

    // flattened constraint list: (block/sample index, a = psi_hat - psi_bar, b)
    let mut cons: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    for (i, s) in sets.iter().enumerate() {
        for c in &s.constraints {
            let a: Vec<f64> = s
                .psi_hat
                .iter()
                .zip(&c.psi_bar)
                .map(|(x, y)| x - y)
                .collect();
            cons.push((i, a, c.loss_bar));
        }
    }

    let w_of = |c: &[f64]| -> Vec<f64> {
        let mut w: Vec<f64> = c.iter().map(|&x| x / lambda).collect();
        if w[p] < 0.0 {
            w[p] = 0.0;
        }
        w
    };
    // dual value: -c^T M c / (2 lambda) + alpha ||w0||^2 + (C/N) sum mu*b
    let dual_of = |c: &[f64], mu_b: f64| -> f64 {
        let mut q = 0.0;
        for (k, &ck) in c.iter().enumerate() {
            if k != p || ck >= 0.0 {
                q += ck * ck;
            }
        }
        -q / (2.0 * lambda) + hp.alpha * dot(&w0, &w0) + cn * mu_b
    };

    let mut best_w = warm.to_vec();
    if best_w[p] < 0.0 {
        best_w[p] = 0.0;
    }
    let mut best_f = ssvm_objective(&best_w, sets, hp);
    if !best_f.is_finite() {
        return Err(Error::NonFiniteObjective);
    }

    // c accumulates 2a*w0 - (C/N) sum mu*a incrementally
    let mut mu = vec![0.0f64; cons.len()];
    let mut block_sum = vec![0.0f64; sets.len()];
    let mut c: Vec<f64> = w0.iter().map(|&x| 2.0 * hp.alpha * x).collect();
    let mut mu_b = 0.0f64;

    for pass in 0..hp.qp_max_passes {
        for (j, (block, a, b)) in cons.iter().enumerate() {
            let lo = -mu[j];
            let hi = 1.0 - block_sum[*block];
            if hi - lo < 1e-15 {
                continue;
            }
            // concave piecewise-quadratic in t; candidates: staying put,
            // per-piece optima, the clamp breakpoint, and the interval ends
            let mut candidates = vec![0.0, lo, hi];
            for piece_neg in [false, true] {
                // selector M zeroes the pairwise coordinate when c_p < 0
                let mut v0 = *b;
                let mut aa = 0.0;
                for k in 0..d {
                    if k == p && piece_neg {
                        continue;
                    }
                    v0 += c[k] * a[k] / lambda;
                    aa += a[k] * a[k];
                }
                if aa > 1e-300 {
                    candidates.push(v0 * lambda / (cn * aa));
                }
            }
            if a[p].abs() > 1e-300 {
                // t where c_p crosses zero
                candidates.push(c[p] / (cn * a[p]));
            }
            let mut best_t = 0.0;
            let mut best_g = f64::NEG_INFINITY;
            for &t in &candidates {
                let t = t.clamp(lo, hi);
                let mut ct = c.clone();
                for k in 0..d {
                    ct[k] -= t * cn * a[k];
                }
                let g = dual_of(&ct, mu_b + t * b);
                if g > best_g {
                    best_g = g;
                    best_t = t;
                }
            }
            if best_t != 0.0 {
                mu[j] += best_t;
                block_sum[*block] += best_t;
                mu_b += best_t * b;
                for k in 0..d {
                    c[k] -= best_t * cn * a[k];
                }
            }
        }

        if pass % 4 == 3 || pass + 1 == hp.qp_max_passes || cons.is_empty() {
            let w = w_of(&c);
            let f = ssvm_objective(&w, sets, hp);
            if !f.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            if f < best_f {
                best_f = f;
                best_w = w;
            }
            let gap = best_f - dual_of(&c, mu_b);
            if gap <= hp.qp_tol * best_f.abs().max(1.0) {
                break;
            }
        }
        if cons.is_empty() {
            break;
        }
    }

    // exact finisher: read the active set off the dual solution and solve KKT
    for band in [1e-8, 1e-6, 1e-4, 1e-2] {
        if let Some(cand) = kkt_polish(&best_w, sets, hp, band) {
            let f = ssvm_objective(&cand, sets, hp);
            if f <= best_f + 1e-12 {
                best_w = cand;
                break;
            }
        }
    }
    Ok(best_w)
}

/// One CCCP outer-iteration record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub constraints_total: usize,
    pub mean_imputed_loss: f64,
}

/// Training report: the per-iteration trace plus convergence status.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub class: u8,
    pub w0: Vec<f64>,
    pub iterations: Vec<IterRecord>,
    pub converged: bool,
}

/// Learns the weight vector of one class by CCCP.
///
/// Outer loop: impute latent deformations at the current weights, then run
/// the cutting-plane loop (most-violated constraint, working-set update,
/// SSVM re-solve) until no working set grows; stop when the surrogate
/// objective decreases by less than epsilon.
pub fn cccp_train(
    samples: &[TrainSample],
    class: u8,
    hp: &Hyperparams,
    reg: &RegParams,
) -> Result<(WeightVector, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("need at least one training sample".into()));
    }
    let contexts: Vec<SampleContext> = samples
        .par_iter()
        .map(|s| SampleContext::build(s, class, reg))
        .collect::<Result<Vec<_>>>()?;

    let mut w = hp.w0.to_concat();
    let mut imputed: Vec<Option<DeformationLabeling>> = vec![None; contexts.len()];
    // cuts found in earlier iterations stay valid (they do not depend on the
    // imputation), so a per-sample pool is rechecked alongside fresh oracle
    // cuts; this keeps the objective estimate consistent across iterations
    let mut pool: Vec<Vec<Constraint>> = vec![Vec::new(); contexts.len()];
    let mut report = TrainReport {
        class,
        w0: hp.w0.to_concat(),
        iterations: Vec::new(),
        converged: false,
    };
    let mut prev_obj = f64::INFINITY;
    let mut best: Option<(f64, Vec<f64>)> = None;

    for outer in 0..hp.max_outer {
        let wv = WeightVector::from_concat(&w);
        // (a) impute latent deformations; keep the previous imputation when
        // it scores better under the current weights (approximate solver guard)
        let new_imputed: Vec<DeformationLabeling> = contexts
            .par_iter()
            .map(|ctx| impute_latent(ctx, &wv, hp.eta, reg.exact_cap))
            .collect::<Result<Vec<_>>>()?;
        for (i, cand) in new_imputed.into_iter().enumerate() {
            let ctx = &contexts[i];
            let cand_e = ctx.class_energy(&wv, &cand) + hp.eta * ctx.loss.evaluate(&cand);
            let keep_old = imputed[i].as_ref().is_some_and(|old| {
                ctx.class_energy(&wv, old) + hp.eta * ctx.loss.evaluate(old) < cand_e
            });
            if !keep_old {
                imputed[i] = Some(cand);
            }
        }
        let mut sets: Vec<WorkingSet> = contexts
            .iter()
            .zip(&imputed)
            .map(|(ctx, lab)| WorkingSet {
                psi_hat: ctx.psi(lab.as_ref().unwrap()),
                constraints: Vec::new(),
            })
            .collect();

        // (b) cutting-plane loop over fresh oracle cuts plus the pool
        let w_enter = w.clone();
        for _ in 0..hp.max_inner {
            let wv = WeightVector::from_concat(&w);
            let found: Vec<Constraint> = contexts
                .par_iter()
                .zip(imputed.par_iter())
                .map(|(ctx, lab)| {
                    most_violated(ctx, &wv, lab.as_ref(), reg.exact_cap).map(|(_, c)| c)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut added = 0;
            for (i, cons) in found.into_iter().enumerate() {
                if !pool[i].iter().any(|p| constraints_equal(p, &cons)) {
                    pool[i].push(cons);
                }
                // admit every sufficiently violated pooled cut
                for cand in &pool[i] {
                    let violation =
                        dot(&w, &sets[i].psi_hat) - dot(&w, &cand.psi_bar) + cand.loss_bar;
                    let xi = sets[i].slack(&w);
                    if violation > xi + hp.cut_tol && !sets[i].contains(cand) {
                        sets[i].constraints.push(cand.clone());
                        added += 1;
                    }
                }
            }
            if added == 0 {
                break;
            }
            w = ssvm_step(&sets, hp, &w)?;
        }
        // intermediate QP legs minimize weaker working sets; under the final
        // set the entry point may still be the better iterate, so keep it
        if ssvm_objective(&w_enter, &sets, hp) < ssvm_objective(&w, &sets, hp) {
            w = w_enter;
        }

        // (c) outer objective and stopping: the loss-augmented surrogate
        // (working-set objective plus the imputed-loss term) is the quantity
        // both CCCP phases decrease, so it is what gets logged and checked
        let constraints_total = sets.iter().map(|s| s.constraints.len()).sum();
        let mean_imputed_loss = contexts
            .iter()
            .zip(&imputed)
            .map(|(ctx, lab)| ctx.loss.evaluate(lab.as_ref().unwrap()))
            .sum::<f64>()
            / contexts.len() as f64;
        let objective = ssvm_objective(&w, &sets, hp)
            + (hp.c / contexts.len() as f64) * hp.eta * mean_imputed_loss * contexts.len() as f64;
        report.iterations.push(IterRecord {
            iter: outer,
            objective,
            constraints_total,
            mean_imputed_loss,
        });
        if best.as_ref().map_or(true, |(f, _)| objective < *f) {
            best = Some((objective, w.clone()));
        }
        if prev_obj - objective < hp.epsilon {
            report.converged = true;
            break;
        }
        prev_obj = objective;
    }

    let final_w = if report.converged {
        w
    } else {
        best.map(|(_, bw)| bw).unwrap_or(w)
    };
    Ok((WeightVector::from_concat(&final_w), report))
}

/// Assembles per-class weight vectors into a matrix; every class id in
/// 0..num_classes must appear exactly once.
pub fn assemble_weight_matrix(
    per_class: &[(u8, WeightVector)],
    num_classes: usize,
) -> Result<WeightMatrix> {
    let mut columns: Vec<Option<WeightVector>> = vec![None; num_classes];
    for (id, w) in per_class {
        let slot = columns
            .get_mut(*id as usize)
            .ok_or(Error::MissingClass(*id))?;
        if slot.is_some() {
            return Err(Error::InvalidConfig(format!("duplicate class {id}")));
        }
        *slot = Some(w.clone());
    }
    let columns = columns
        .into_iter()
        .enumerate()
        .map(|(id, c)| c.ok_or(Error::MissingClass(id as u8)))
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightMatrix { columns })
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightEntry {
    metric_weights: Vec<f64>,
    pairwise_weight: f64,
}

/// Serializes a weight matrix as {class_id: {metric_weights, pairwise_weight}}
/// with the metric order fixed (SAD, MI, NCC, DWT).
pub fn weights_to_json(matrix: &WeightMatrix) -> String {
    let map: BTreeMap<String, WeightEntry> = matrix
        .columns
        .iter()
        .enumerate()
        .map(|(id, w)| {
            (
                id.to_string(),
                WeightEntry {
                    metric_weights: w.metric_weights.clone(),
                    pairwise_weight: w.pairwise_weight,
                },
            )
        })
        .collect();
    serde_json::to_string_pretty(&map).expect("weights serialize")
}

pub fn weights_from_json(s: &str) -> Result<WeightMatrix> {
    let map: BTreeMap<String, WeightEntry> = serde_json::from_str(s)?;
    let mut per_class = Vec::new();
    for (k, v) in map {
        let id: u8 = k
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad class id {k:?}")))?;
        per_class.push((
            id,
            WeightVector {
                metric_weights: v.metric_weights,
                pairwise_weight: v.pairwise_weight,
            },
        ));
    }
    let num = per_class.iter().map(|(id, _)| *id as usize + 1).max().unwrap_or(0);
    assemble_weight_matrix(&per_class, num)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::ControlGrid;
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_sample(seed: u64, dims: [usize; 3]) -> TrainSample {
        let g = Geometry::new(dims, [2.0; 3], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.voxel_count();
        let source = Volume::new(g, (0..n).map(|_| rng.gen()).collect()).unwrap();
        let target = Volume::new(g, (0..n).map(|_| rng.gen()).collect()).unwrap();
        let source_mask =
            SegMask::new(g, (0..n).map(|_| rng.gen_range(0..2u8)).collect()).unwrap();
        let target_mask =
            SegMask::new(g, (0..n).map(|_| rng.gen_range(0..2u8)).collect()).unwrap();
        TrainSample {
            source,
            target,
            source_mask,
            target_mask,
        }
    }

    fn tiny_reg() -> RegParams {
        RegParams {
            grid_spacing_mm: 8.0,
            labels_per_axis: 3,
            max_step_frac: 0.4,
            exact_cap: 2e4,
            ..Default::default()
        }
    }

    fn tiny_context(seed: u64) -> SampleContext {
        // 2x2x1 grid over a small volume: 4 nodes, 27 labels is too many for
        // exhaustive tests, so shrink to 3 labels per axis -> use subset below
        let sample = tiny_sample(seed, [7, 7, 4]);
        let reg = tiny_reg();
        let mut ctx = SampleContext::build(&sample, 1, &reg).unwrap();
        // shrink to a 2x2x1 grid by rebuilding on a custom lattice
        let grid = ControlGrid::lattice([2, 2, 1], 12.0, [0.0, 0.0, 3.0]);
        let labels = crate::deform::build_label_set(3.0, 3).unwrap();
        let params = crate::metrics::FeatureParams {
            patch_half_extent: [1, 1, 1],
            mi_bins: 16,
            normalize: true,
        };
        ctx.table = crate::metrics::build_unary_table(
            &sample.source,
            &sample.target,
            &grid,
            &labels,
            &reg.metrics,
            &params,
        );
        ctx.loss = crate::dice::build_loss_table(
            &sample.source_mask,
            &sample.target_mask,
            &grid,
            &labels,
            1,
        )
        .unwrap();
        ctx.grid = grid;
        ctx.labels = labels;
        ctx
    }

    fn all_labelings(num_nodes: usize, num_labels: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = vec![0usize; num_nodes];
        loop {
            out.push(cur.clone());
            let mut k = 0;
            loop {
                if k == num_nodes {
                    return out;
                }
                cur[k] += 1;
                if cur[k] < num_labels {
                    break;
                }
                cur[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn psi_zero_labeling_and_single_node() {
        let ctx = tiny_context(1);
        let zero = DeformationLabeling::zeros(&ctx.grid, &ctx.labels);
        let psi = ctx.psi(&zero);
        assert_eq!(psi.len(), 5);
        assert_eq!(psi[4], 0.0, "zero displacements have zero pairwise");
        let z = ctx.labels.zero_index();
        for j in 0..4 {
            let want: f64 = (0..ctx.grid.num_nodes())
                .map(|i| ctx.table.feature(i, z)[j])
                .sum();
            assert!((psi[j] - want).abs() < 1e-12);
        }

        // single-node graph: pairwise entry 0 for any labeling
        let grid1 = ControlGrid::lattice([1, 1, 1], 10.0, [0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let lab = DeformationLabeling {
                labels: vec![rng.gen_range(0..ctx.labels.len())],
            };
            let sub = UnaryFeatureTable {
                num_nodes: 1,
                num_labels: ctx.labels.len(),
                metrics: ctx.table.metrics.clone(),
                values: ctx.table.values[..ctx.labels.len() * 4].to_vec(),
            };
            let psi = joint_feature_map(&sub, &grid1, &ctx.labels, &lab);
            assert_eq!(psi[4], 0.0);
        }
    }

    #[test]
    fn psi_matches_term_by_term_oracle() {
        let ctx = tiny_context(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let lab = DeformationLabeling {
                labels: (0..4).map(|_| rng.gen_range(0..ctx.labels.len())).collect(),
            };
            let psi = ctx.psi(&lab);
            for j in 0..4 {
                let mut want = 0.0;
                for i in 0..4 {
                    want += ctx.table.feature(i, lab.labels[i])[j];
                }
                assert!((psi[j] - want).abs() < 1e-12);
            }
            let mut pair = 0.0;
            for &(i, k) in &ctx.grid.edges {
                let u = ctx.labels.vectors[lab.labels[i]];
                let v = ctx.labels.vectors[lab.labels[k]];
                pair += (u[0] - v[0]).abs() + (u[1] - v[1]).abs() + (u[2] - v[2]).abs();
            }
            assert!((psi[4] - pair).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_feature_map_identity() {
        let ctx = tiny_context(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let w = WeightVector {
                metric_weights: (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                pairwise_weight: rng.gen_range(0.0..3.0),
            };
            let lab = DeformationLabeling {
                labels: (0..4).map(|_| rng.gen_range(0..ctx.labels.len())).collect(),
            };
            let via_psi = dot(&w.to_concat(), &ctx.psi(&lab));
            let model = ctx.model_with_loss(&w, 0.0).unwrap();
            let via_energy = model.energy(&lab);
            assert!(
                (via_psi - via_energy).abs() <= 1e-9,
                "psi {via_psi} vs energy {via_energy}"
            );
        }
    }

    #[test]
    fn impute_eta_zero_is_plain_argmin() {
        let ctx = tiny_context(7);
        let w = WeightVector {
            metric_weights: vec![1.0, 2.0, 0.5, 1.5],
            pairwise_weight: 0.05,
        };
        let lab = impute_latent(&ctx, &w, 0.0, 1e6).unwrap();
        // exhaustive argmin of the class energy
        let mut best = f64::INFINITY;
        let mut best_lab = None;
        for cand in all_labelings(4, ctx.labels.len()) {
            let l = DeformationLabeling { labels: cand };
            let e = ctx.class_energy(&w, &l);
            if e < best {
                best = e;
                best_lab = Some(l);
            }
        }
        let got = ctx.class_energy(&w, &lab);
        assert!((got - best).abs() < 1e-9, "got {got}, want {best}");
        let _ = best_lab;
    }

    #[test]
    fn impute_matches_exhaustive_augmented_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..10 {
            let ctx = tiny_context(100 + seed);
            let w = WeightVector {
                metric_weights: (0..4).map(|_| rng.gen_range(-2.0..4.0)).collect(),
                pairwise_weight: rng.gen_range(0.0..0.5),
            };
            let eta = rng.gen_range(0.0..20.0);
            let lab = impute_latent(&ctx, &w, eta, 1e6).unwrap();
            let got = ctx.class_energy(&w, &lab) + eta * ctx.loss.evaluate(&lab);
            let mut best = f64::INFINITY;
            for cand in all_labelings(4, ctx.labels.len()) {
                let l = DeformationLabeling { labels: cand };
                let e = ctx.class_energy(&w, &l) + eta * ctx.loss.evaluate(&l);
                best = best.min(e);
            }
            assert!((got - best).abs() < 1e-9);
        }
    }

    #[test]
    fn most_violated_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let ctx = tiny_context(200 + seed);
            let w = WeightVector {
                metric_weights: (0..4).map(|_| rng.gen_range(-2.0..4.0)).collect(),
                pairwise_weight: rng.gen_range(0.0..0.5),
            };
            let (lab, cons) = most_violated(&ctx, &w, None, 1e6).unwrap();
            let got = ctx.class_energy(&w, &lab) - ctx.loss.evaluate(&lab);
            let mut best = f64::INFINITY;
            for cand in all_labelings(4, ctx.labels.len()) {
                let l = DeformationLabeling { labels: cand };
                best = best.min(ctx.class_energy(&w, &l) - ctx.loss.evaluate(&l));
            }
            assert!((got - best).abs() < 1e-9);
            assert!((0.0..=1.0 + 1e-9).contains(&cons.loss_bar));
        }
    }

    #[test]
    fn most_violated_zero_loss_table_is_plain_argmin() {
        let mut ctx = tiny_context(11);
        // zero out the loss table
        ctx.loss = LossTable {
            num_nodes: 4,
            num_labels: ctx.labels.len(),
            values: vec![0.0; 4 * ctx.labels.len()],
            offsets: vec![0.0; 4],
        };
        let w = WeightVector {
            metric_weights: vec![1.0, 0.5, 2.0, 0.25],
            pairwise_weight: 0.1,
        };
        let (lab, _) = most_violated(&ctx, &w, None, 1e6).unwrap();
        let plain = impute_latent(&ctx, &w, 0.0, 1e6).unwrap();
        assert!(
            (ctx.class_energy(&w, &lab) - ctx.class_energy(&w, &plain)).abs() < 1e-9
        );
    }

    #[test]
    fn ssvm_empty_sets_closed_form() {
        for alpha in [0.5, 1.0, 2.0] {
            let hp = Hyperparams {
                alpha,
                ..Default::default()
            };
            let sets = vec![
                WorkingSet {
                    psi_hat: vec![0.0; 5],
                    constraints: vec![],
                };
                3
            ];
            let w = ssvm_step(&sets, &hp, &hp.w0.to_concat()).unwrap();
            let shrink = 2.0 * alpha / (1.0 + 2.0 * alpha);
            for (k, &got) in w.iter().enumerate() {
                let want = hp.w0.to_concat()[k] * shrink;
                assert!(
                    (got - want).abs() < 1e-6,
                    "alpha {alpha} coord {k}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn ssvm_single_constraint_matches_kkt_oracle() {
        // 1-D toy (one metric weight; the pairwise coordinate stays at zero):
        // f(u) = 0.5 u^2 + alpha (u - u0)^2 + C max(0, a u + b)
        let cases = [
            // (u0, a, b, C, alpha) chosen to hit: inactive, active, kink
            (4.0, 1.0, -10.0, 2.0, 1.0),  // hinge inactive
            (4.0, -1.0, 1.0, 2.0, 1.0),   // hinge fully active
            (4.0, -1.0, 2.0, 50.0, 1.0),  // optimum at the kink
        ];
        for (u0, a, b, c, alpha) in cases {
            let hp = Hyperparams {
                c,
                alpha,
                w0: WeightVector {
                    metric_weights: vec![u0],
                    pairwise_weight: 0.0,
                },
                ..Default::default()
            };
            let sets = vec![WorkingSet {
                psi_hat: vec![a, 0.0],
                constraints: vec![Constraint {
                    psi_bar: vec![0.0, 0.0],
                    loss_bar: b,
                }],
            }];
            let got = ssvm_step(&sets, &hp, &hp.w0.to_concat()).unwrap();

            // analytic KKT case analysis
            let lam = 1.0 + 2.0 * alpha;
            let cand_inactive = 2.0 * alpha * u0 / lam;
            let cand_active = (2.0 * alpha * u0 - c * a) / lam;
            let want = if a * cand_inactive + b <= 1e-12 {
                cand_inactive
            } else if a * cand_active + b >= -1e-12 {
                cand_active
            } else {
                -b / a
            };
            assert!(
                (got[0] - want).abs() < 1e-5,
                "case ({u0},{a},{b},{c},{alpha}): got {} want {want}",
                got[0]
            );
            assert!(got[1] >= 0.0);
        }
    }

    #[test]
    fn ssvm_projects_pairwise_nonnegative() {
        let hp = Hyperparams {
            w0: WeightVector {
                metric_weights: vec![1.0],
                pairwise_weight: 0.5,
            },
            ..Default::default()
        };
        // constraint pushing the pairwise weight negative
        let sets = vec![WorkingSet {
            psi_hat: vec![0.0, 5.0],
            constraints: vec![Constraint {
                psi_bar: vec![0.0, 0.0],
                loss_bar: 0.5,
            }],
        }];
        let w = ssvm_step(&sets, &hp, &hp.w0.to_concat()).unwrap();
        assert!(w[1] >= 0.0);
        // feasibility of the slack bound at the solution
        for s in &sets {
            let xi = s.slack(&w);
            for c in &s.constraints {
                let v = dot(&w, &s.psi_hat) - dot(&w, &c.psi_bar) + c.loss_bar;
                assert!(xi >= v - 1e-6);
            }
        }
    }

    #[test]
    fn weight_matrix_assembly_and_json_roundtrip() {
        let w1 = WeightVector {
            metric_weights: vec![0.25, 1.5, -0.75, 3.0],
            pairwise_weight: 0.125,
        };
        let w2 = WeightVector {
            metric_weights: vec![1.0, 0.0, 2.0, 0.5],
            pairwise_weight: 0.0625,
        };
        let m = assemble_weight_matrix(&[(1, w2.clone()), (0, w1.clone())], 2).unwrap();
        assert_eq!(m.columns[0], w1);
        assert_eq!(m.columns[1], w2);
        let json = weights_to_json(&m);
        let back = weights_from_json(&json).unwrap();
        assert_eq!(back, m);
        // missing class is an error
        assert!(matches!(
            assemble_weight_matrix(&[(1, w2)], 2),
            Err(Error::MissingClass(0))
        ));
    }

    #[test]
    fn cccp_fixed_point_terminates_quickly() {
        // identical source/target pairs: the zero labeling already has zero
        // loss, so no constraint is sufficiently violated at shrunk w0
        let g = Geometry::new([6, 6, 4], [2.0; 3], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = g.voxel_count();
        let vol = Volume::new(g, (0..n).map(|_| rng.gen()).collect()).unwrap();
        let mask = SegMask::new(
            g,
            (0..n).map(|i| if i % 7 == 0 { 1u8 } else { 0 }).collect(),
        )
        .unwrap();
        let sample = TrainSample {
            source: vol.clone(),
            target: vol,
            source_mask: mask.clone(),
            target_mask: mask,
        };
        let hp = Hyperparams {
            w0: WeightVector {
                metric_weights: vec![1.0, 1.0, 1.0, 1.0],
                pairwise_weight: 0.1,
            },
            ..Default::default()
        };
        let reg = tiny_reg();
        let (w, report) = cccp_train(&[sample], 1, &hp, &reg).unwrap();
        assert!(report.converged);
        assert!(report.iterations.len() <= 3);
        // with few/no constraints the solution stays near the shrunk w0
        let shrink = 2.0 * hp.alpha / (1.0 + 2.0 * hp.alpha);
        for (k, &got) in w.to_concat().iter().enumerate() {
            let near = hp.w0.to_concat()[k] * shrink;
            assert!((got - near).abs() < 1.0, "coord {k}: {got} vs {near}");
        }
    }
}
