//! Energy assembly and discrete minimization: exact enumeration for tiny
//! instances, alpha-expansion with max-flow plus an ICM polish otherwise.

use serde::{Deserialize, Serialize};

use crate::deform::{ControlGrid, DeformationLabeling, DisplacementLabelSet};
use crate::error::{Error, Result};
use crate::maxflow::FlowGraph;
use crate::metrics::{extract_mask_patch, MaskPatch, UnaryFeatureTable};
use crate::volume::{ClassSet, SegMask};

/// Per-class weights: one scalar per metric plus the pairwise weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub metric_weights: Vec<f64>,
    pub pairwise_weight: f64,
}

impl WeightVector {
    pub fn new(metric_weights: Vec<f64>, pairwise_weight: f64) -> Result<Self> {
        if pairwise_weight < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "pairwise weight must be >= 0, got {pairwise_weight}"
            )));
        }
        Ok(Self {
            metric_weights,
            pairwise_weight,
        })
    }

    /// Length of the concatenated (metrics, pairwise) vector.
    pub fn dim(&self) -> usize {
        self.metric_weights.len() + 1
    }

    /// Concatenated form used by the learning stack.
    pub fn to_concat(&self) -> Vec<f64> {
        let mut v = self.metric_weights.clone();
        v.push(self.pairwise_weight);
        v
    }

    pub fn from_concat(v: &[f64]) -> Self {
        Self {
            metric_weights: v[..v.len() - 1].to_vec(),
            pairwise_weight: v[v.len() - 1],
        }
    }
}

/// Learned weights per class: column c holds the metric weights of class c.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    /// columns[c] = weight vector learned for class id c
    pub columns: Vec<WeightVector>,
}

impl WeightMatrix {
    pub fn column(&self, class: u8) -> Result<&WeightVector> {
        self.columns
            .get(class as usize)
            .ok_or(Error::MissingClass(class))
    }

    pub fn num_classes(&self) -> usize {
        self.columns.len()
    }

    /// Mean of the per-class pairwise weights, used when a single smoothness
    /// scale is required by the multi-class energy.
    pub fn mean_pairwise(&self) -> f64 {
        if self.columns.is_empty() {
            return 0.0;
        }
        self.columns.iter().map(|c| c.pairwise_weight).sum::<f64>() / self.columns.len() as f64
    }

    /// Mean L1 norm of the metric-weight columns: the unary scale the matrix
    /// imposes on normalized features.
    pub fn mean_column_norm(&self) -> f64 {
        if self.columns.is_empty() {
            return 0.0;
        }
        self.columns
            .iter()
            .map(|c| c.metric_weights.iter().map(|w| w.abs()).sum::<f64>())
            .sum::<f64>()
            / self.columns.len() as f64
    }
}

/// Assembled MRF: weight-combined unaries, L1-metric pairwise, grid edges.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub num_nodes: usize,
    pub num_labels: usize,
    /// node-major: node * num_labels + label
    pub unary: Vec<f64>,
    pub pairwise_weight: f64,
    pub edges: Vec<(usize, usize)>,
    /// L1 distances between label pairs, num_labels^2 entries
    pub label_dist: Vec<f64>,
}

impl EnergyModel {
    pub fn new(
        unary: Vec<f64>,
        num_labels: usize,
        pairwise_weight: f64,
        edges: Vec<(usize, usize)>,
        labels: &DisplacementLabelSet,
    ) -> Result<Self> {
        if pairwise_weight < 0.0 {
            return Err(Error::InvalidConfig("pairwise weight must be >= 0".into()));
        }
        if num_labels != labels.len() || unary.len() % num_labels != 0 {
            return Err(Error::InvalidConfig("unary table shape mismatch".into()));
        }
        let mut label_dist = vec![0.0; num_labels * num_labels];
        for a in 0..num_labels {
            for b in 0..num_labels {
                label_dist[a * num_labels + b] = labels.l1(a, b);
            }
        }
        Ok(Self {
            num_nodes: unary.len() / num_labels,
            num_labels,
            unary,
            pairwise_weight,
            edges,
            label_dist,
        })
    }

    #[inline]
    pub fn unary_at(&self, node: usize, label: usize) -> f64 {
        self.unary[node * self.num_labels + label]
    }

    #[inline]
    pub fn pairwise(&self, a: usize, b: usize) -> f64 {
        self.pairwise_weight * self.label_dist[a * self.num_labels + b]
    }

    /// Total energy of a labeling.
    pub fn energy(&self, labeling: &DeformationLabeling) -> f64 {
        let mut e = 0.0;
        for (i, &l) in labeling.labels.iter().enumerate() {
            e += self.unary_at(i, l);
        }
        for &(i, j) in &self.edges {
            e += self.pairwise(labeling.labels[i], labeling.labels[j]);
        }
        e
    }
}

/// Most dominant class of a mask patch; ties break to the lowest class id.
pub fn dominant_class(patch: &MaskPatch, classes: &ClassSet) -> u8 {
    let mut counts = [0u32; 256];
    for &l in &patch.labels {
        counts[l as usize] += 1;
    }
    let mut best = 0usize;
    for c in 1..classes.len().min(256) {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best as u8
}

/// How the dominant class is located when combining per-class weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DominantClassMode {
    /// Mask patch at the displaced node position (per label).
    Displaced,
    /// Mask patch at the original node position.
    Original,
}

/// Combines a feature table with per-class weights into unary potentials.
///
/// For each node and label the weight column is picked by the dominant class
/// of the source-mask patch, at the displaced position by default.
pub fn combine_unaries_per_class(
    table: &UnaryFeatureTable,
    weights: &WeightMatrix,
    source_mask: &SegMask,
    classes: &ClassSet,
    grid: &ControlGrid,
    labels: &DisplacementLabelSet,
    patch_half_extent: [usize; 3],
    mode: DominantClassMode,
) -> Result<Vec<f64>> {
    let m = table.num_metrics();
    for col in &weights.columns {
        if col.metric_weights.len() != m {
            return Err(Error::ArityMismatch {
                weights: col.metric_weights.len(),
                table: m,
            });
        }
    }
    let mut unary = vec![0.0f64; table.num_nodes * table.num_labels];
    for node in 0..table.num_nodes {
        let p = grid.node_positions[node];
        let original_class = if mode == DominantClassMode::Original {
            let patch = extract_mask_patch(source_mask, p, patch_half_extent);
            Some(dominant_class(&patch, classes))
        } else {
            None
        };
        for (l, d) in labels.vectors.iter().enumerate() {
            let class = match mode {
                DominantClassMode::Displaced => {
                    let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
                    let patch = extract_mask_patch(source_mask, q, patch_half_extent);
                    dominant_class(&patch, classes)
                }
                DominantClassMode::Original => original_class.unwrap(),
            };
            let w = weights.column(class)?;
            let f = table.feature(node, l);
            unary[node * table.num_labels + l] = dot(&w.metric_weights, f);
        }
    }
    Ok(unary)
}

/// Class-based unaries: one weight vector applied to every node, mask unused.
pub fn combine_unaries_single(table: &UnaryFeatureTable, w: &WeightVector) -> Result<Vec<f64>> {
    if w.metric_weights.len() != table.num_metrics() {
        return Err(Error::ArityMismatch {
            weights: w.metric_weights.len(),
            table: table.num_metrics(),
        });
    }
    let m = table.num_metrics();
    Ok((0..table.num_nodes * table.num_labels)
        .map(|i| dot(&w.metric_weights, &table.values[i * m..(i + 1) * m]))
        .collect())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const EXACT_SOLVE_CAP: f64 = 1e6;

/// Global optimum by exhaustive enumeration; errors above [`EXACT_SOLVE_CAP`]
/// labelings.
pub fn solve_exact(model: &EnergyModel) -> Result<(DeformationLabeling, f64)> {
    let total = (model.num_labels as f64).powi(model.num_nodes as i32);
    if total > EXACT_SOLVE_CAP {
        return Err(Error::InstanceTooLarge(total));
    }
    let mut current = vec![0usize; model.num_nodes];
    let mut best = current.clone();
    let mut best_e = f64::INFINITY;
    loop {
        let labeling = DeformationLabeling {
            labels: current.clone(),
        };
        let e = model.energy(&labeling);
        if e < best_e {
            best_e = e;
            best = current.clone();
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == model.num_nodes {
                return Ok((DeformationLabeling { labels: best }, best_e));
            }
            current[k] += 1;
            if current[k] < model.num_labels {
                break;
            }
            current[k] = 0;
            k += 1;
        }
    }
}

/// One alpha-expansion move: optimal binary relabeling toward `alpha`.
fn expansion_move(model: &EnergyModel, cur: &[usize], alpha: usize) -> Vec<usize> {
    let n = model.num_nodes;
    // signed t-link accumulators: cost of x_i = 1 (take alpha) and x_i = 0
    let mut cost1 = vec![0.0f64; n];
    let mut cost0 = vec![0.0f64; n];
    for i in 0..n {
        cost1[i] = model.unary_at(i, alpha);
        cost0[i] = model.unary_at(i, cur[i]);
    }
    // aux arcs from the pairwise decomposition
    let mut pair_arcs = Vec::with_capacity(model.edges.len());
    for &(i, j) in &model.edges {
        let a = model.pairwise(cur[i], cur[j]);
        let b = model.pairwise(cur[i], alpha);
        let c = model.pairwise(alpha, cur[j]);
        // E(xi,xj) = a + (c-a) xi + (0-c) xj + (b+c-a) (1-xi) xj
        cost1[i] += c - a;
        cost1[j] -= c;
        let w = b + c - a;
        debug_assert!(w >= -1e-9, "non-metric pairwise: {w}");
        if w > 0.0 {
            pair_arcs.push((i, j, w));
        }
    }
    let mut g = FlowGraph::new(n);
    let (s, t) = (g.source, g.sink);
    for i in 0..n {
        // normalize the two t-links so both capacities are nonnegative
        let m = cost0[i].min(cost1[i]);
        let c0 = cost0[i] - m;
        let c1 = cost1[i] - m;
        // cut pays c1 when i lands on the sink side (x_i = 1)
        g.add_arc(s, i, c1);
        g.add_arc(i, t, c0);
    }
    for (i, j, w) in pair_arcs {
        g.add_arc(i, j, w);
    }
    g.max_flow();
    let source_side = g.min_cut_source_side();
    let mut next = cur.to_vec();
    for i in 0..n {
        // sink side means the node switched to alpha
        if !source_side[i] {
            next[i] = alpha;
        }
    }
    next
}

/// Result of an approximate solve, including the accepted-move energy trace.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub labeling: DeformationLabeling,
    pub energy: f64,
    /// Energy after init and after each accepted move; non-increasing.
    pub trace: Vec<f64>,
}

/// Alpha-expansion sweeps until no label improves the energy, followed by an
/// ICM pass. Moves are accepted only when the energy strictly decreases, so
/// the trace is monotone.
pub fn solve_expansion(model: &EnergyModel, init: &DeformationLabeling) -> Result<SolveResult> {
    init_shape_check(model, init)?;
    let mut cur = init.labels.clone();
    let mut cur_e = model.energy(init);
    let mut trace = vec![cur_e];
    let max_sweeps = 12;
    for _ in 0..max_sweeps {
        let mut improved = false;
        for alpha in 0..model.num_labels {
            let cand = expansion_move(model, &cur, alpha);
            if cand == cur {
                continue;
            }
            let cand_e = model.energy(&DeformationLabeling {
                labels: cand.clone(),
            });
            if cand_e < cur_e - 1e-12 {
                cur = cand;
                cur_e = cand_e;
                trace.push(cur_e);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    // ICM polish: per-node argmin given fixed neighbors
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); model.num_nodes];
    for &(i, j) in &model.edges {
        neighbors[i].push(j);
        neighbors[j].push(i);
    }
    for _ in 0..50 {
        let mut changed = false;
        for i in 0..model.num_nodes {
            let mut best_l = cur[i];
            let mut best_c = local_cost(model, &cur, &neighbors, i, cur[i]);
            for l in 0..model.num_labels {
                let c = local_cost(model, &cur, &neighbors, i, l);
                if c < best_c - 1e-12 {
                    best_c = c;
                    best_l = l;
                }
            }
            if best_l != cur[i] {
                cur[i] = best_l;
                changed = true;
            }
        }
        if changed {
            let e = model.energy(&DeformationLabeling { labels: cur.clone() });
            if e < cur_e - 1e-12 {
                cur_e = e;
                trace.push(cur_e);
            }
        } else {
            break;
        }
    }
    Ok(SolveResult {
        labeling: DeformationLabeling { labels: cur },
        energy: cur_e,
        trace,
    })
}

fn init_shape_check(model: &EnergyModel, init: &DeformationLabeling) -> Result<()> {
    if init.labels.len() != model.num_nodes {
        return Err(Error::InvalidConfig(format!(
            "init labeling length {} != {} nodes",
            init.labels.len(),
            model.num_nodes
        )));
    }
    if init.labels.iter().any(|&l| l >= model.num_labels) {
        return Err(Error::InvalidConfig("init label out of range".into()));
    }
    Ok(())
}

fn local_cost(
    model: &EnergyModel,
    cur: &[usize],
    neighbors: &[Vec<usize>],
    node: usize,
    label: usize,
) -> f64 {
    let mut c = model.unary_at(node, label);
    for &j in &neighbors[node] {
        c += model.pairwise(label, cur[j]);
    }
    c
}

/// Picks the exact solver below `exact_cap` labelings, expansion otherwise.
pub fn solve_auto(
    model: &EnergyModel,
    init: &DeformationLabeling,
    exact_cap: f64,
) -> Result<SolveResult> {
    let total = (model.num_labels as f64).powi(model.num_nodes as i32);
    if total <= exact_cap.min(EXACT_SOLVE_CAP) {
        let (labeling, energy) = solve_exact(model)?;
        let init_e = model.energy(init);
        Ok(SolveResult {
            trace: vec![init_e, energy],
            labeling,
            energy,
        })
    } else {
        solve_expansion(model, init)
    }
}

/// Per-node unary argmin, ignoring the pairwise term.
pub fn unary_argmin_labeling(model: &EnergyModel) -> DeformationLabeling {
    let labels = (0..model.num_nodes)
        .map(|i| {
            (0..model.num_labels)
                .min_by(|&a, &b| {
                    model
                        .unary_at(i, a)
                        .partial_cmp(&model.unary_at(i, b))
                        .unwrap()
                })
                .unwrap()
        })
        .collect();
    DeformationLabeling { labels }
}

/// Runs the approximate solver from several deterministic inits (the given
/// ones plus the decoupled unary argmin) and keeps the lowest energy. Exact
/// solves are init-independent and run once.
pub fn solve_multi_init(
    model: &EnergyModel,
    inits: &[&DeformationLabeling],
    exact_cap: f64,
) -> Result<SolveResult> {
    assert!(!inits.is_empty());
    let total = (model.num_labels as f64).powi(model.num_nodes as i32);
    if total <= exact_cap.min(EXACT_SOLVE_CAP) {
        return solve_auto(model, inits[0], exact_cap);
    }
    let mut best: Option<SolveResult> = None;
    let decoupled = unary_argmin_labeling(model);
    let mut tried: Vec<&DeformationLabeling> = Vec::new();
    for init in inits.iter().copied().chain(std::iter::once(&decoupled)) {
        if tried.iter().any(|t| *t == init) {
            continue;
        }
        let res = solve_expansion(model, init)?;
        if best.as_ref().map_or(true, |b| res.energy < b.energy) {
            best = Some(res);
        }
        tried.push(init);
    }
    Ok(best.expect("at least one init"))
}
