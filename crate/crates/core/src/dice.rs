//! Dice evaluation and the node-decomposable dice loss surrogate.
//!
//! The surrogate splits the overlap count over the Voronoi cells of the
//! control nodes while keeping a global, labeling-independent denominator:
//!
//!   loss(D) = 1 - sum_i 2 * overlap_i(d_i) / (|S_I_c| + |S_J_c|)
//!
//! where overlap_i counts voxels of cell i whose target class is c and whose
//! source class at the d_i-shifted position is c. This keeps the loss in
//! [0, 1], makes it an exact sum of per-node terms, and equals the dice loss
//! of patchwise-constant shifts.

use rayon::prelude::*;

use crate::deform::{ControlGrid, DeformationLabeling, DisplacementLabelSet};
use crate::error::{Error, Result};
use crate::volume::SegMask;

/// Exact dice overlap of class `c`: 2|A∩B| / (|A|+|B|), 1 when both empty.
pub fn exact_dice(a: &SegMask, b: &SegMask, c: u8) -> Result<f64> {
    if !a.geom.matches(&b.geom) {
        return Err(Error::GeometryMismatch(
            "dice requires masks on the same geometry".into(),
        ));
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut overlap = 0usize;
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let ia = x == c;
        let ib = y == c;
        na += ia as usize;
        nb += ib as usize;
        overlap += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap as f64 / (na + nb) as f64)
}

/// Assigns every voxel to its nearest control node (the node Voronoi cell).
/// Margin nodes of grids built with [`crate::deform::build_grid`] own empty
/// cells because interior nodes are always closer.
pub fn voxel_cells(mask_geom: &crate::volume::Geometry, grid: &ControlGrid) -> Vec<usize> {
    let [gx, gy, gz] = grid.grid_dims;
    let mut cells = Vec::with_capacity(mask_geom.voxel_count());
    for z in 0..mask_geom.dims[2] {
        for y in 0..mask_geom.dims[1] {
            for x in 0..mask_geom.dims[0] {
                let p = mask_geom.position(x, y, z);
                let ni = ((p[0] - grid.origin_mm[0]) / grid.spacing_mm).round();
                let nj = ((p[1] - grid.origin_mm[1]) / grid.spacing_mm).round();
                let nk = ((p[2] - grid.origin_mm[2]) / grid.spacing_mm).round();
                let ni = (ni.max(0.0) as usize).min(gx - 1);
                let nj = (nj.max(0.0) as usize).min(gy - 1);
                let nk = (nk.max(0.0) as usize).min(gz - 1);
                cells.push(grid.node_index(ni, nj, nk));
            }
        }
    }
    cells
}

fn shifted_overlap_count(
    source: &SegMask,
    target: &SegMask,
    cell_voxels: &[Vec<usize>],
    node: usize,
    d: [f64; 3],
    c: u8,
) -> usize {
    let geom = &target.geom;
    let [nx, ny] = [geom.dims[0], geom.dims[1]];
    let mut n = 0usize;
    for &idx in &cell_voxels[node] {
        if target.labels[idx] != c {
            continue;
        }
        let x = idx % nx;
        let y = (idx / nx) % ny;
        let z = idx / (nx * ny);
        let p = geom.position(x, y, z);
        let q = [p[0] + d[0], p[1] + d[1], p[2] + d[2]];
        let [sx, sy, sz] = source.geom.nearest_voxel(q);
        if source.at(sx, sy, sz) == c {
            n += 1;
        }
    }
    n
}

fn group_cells(cells: &[usize], num_nodes: usize) -> Vec<Vec<usize>> {
    let mut grouped = vec![Vec::new(); num_nodes];
    for (idx, &node) in cells.iter().enumerate() {
        grouped[node].push(idx);
    }
    grouped
}

/// Surrogate dice loss of a labeling under patchwise-constant shifts.
pub fn surrogate_loss(
    source: &SegMask,
    target: &SegMask,
    grid: &ControlGrid,
    labeling: &DeformationLabeling,
    labels: &DisplacementLabelSet,
    c: u8,
) -> Result<f64> {
    if !source.geom.matches(&target.geom) {
        return Err(Error::GeometryMismatch(
            "surrogate loss requires masks on the same geometry".into(),
        ));
    }
    labeling.validate(grid, labels)?;
    let denom = (source.class_count(c) + target.class_count(c)) as f64;
    if denom == 0.0 {
        return Ok(0.0);
    }
    let cells = voxel_cells(&target.geom, grid);
    let grouped = group_cells(&cells, grid.num_nodes());
    let mut overlap = 0usize;
    for node in 0..grid.num_nodes() {
        let d = labels.vectors[labeling.labels[node]];
        overlap += shifted_overlap_count(source, target, &grouped, node, d, c);
    }
    Ok(1.0 - 2.0 * overlap as f64 / denom)
}

/// Per-node, per-label loss contributions for loss-augmented inference.
///
/// Entries are nonnegative; `offsets[i]` records the per-node constant
/// subtracted during the shift so exact loss values stay recoverable:
/// `evaluate(labeling) == surrogate_loss(labeling)` holds exactly.
#[derive(Debug, Clone)]
pub struct LossTable {
    pub num_nodes: usize,
    pub num_labels: usize,
    /// node-major: node * num_labels + label
    pub values: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl LossTable {
    #[inline]
    pub fn entry(&self, node: usize, label: usize) -> f64 {
        self.values[node * self.num_labels + label]
    }

    /// Sum of subtracted per-node constants.
    pub fn offset_sum(&self) -> f64 {
        self.offsets.iter().sum()
    }

    /// Recovers the exact surrogate loss of a labeling.
    pub fn evaluate(&self, labeling: &DeformationLabeling) -> f64 {
        let table_sum: f64 = labeling
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| self.entry(i, l))
            .sum();
        table_sum + self.offset_sum()
    }

    pub fn all_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0) && self.offsets.iter().all(|&o| o == 0.0)
    }
}

/// Builds the per-node loss table for class `c`.
///
/// Raw contributions are 1/|V| - 2*overlap_i(l)/denominator, then each node
/// row is shifted down by its minimum so entries are >= 0. When the class is
/// absent from both masks the table is all zeros and the loss identically 0.
pub fn build_loss_table(
    source: &SegMask,
    target: &SegMask,
    grid: &ControlGrid,
    labels: &DisplacementLabelSet,
    c: u8,
) -> Result<LossTable> {
    if !source.geom.matches(&target.geom) {
        return Err(Error::GeometryMismatch(
            "loss table requires masks on the same geometry".into(),
        ));
    }
    let num_nodes = grid.num_nodes();
    let num_labels = labels.len();
    let denom = (source.class_count(c) + target.class_count(c)) as f64;
    if denom == 0.0 {
        return Ok(LossTable {
            num_nodes,
            num_labels,
            values: vec![0.0; num_nodes * num_labels],
            offsets: vec![0.0; num_nodes],
        });
    }
    let cells = voxel_cells(&target.geom, grid);
    let grouped = group_cells(&cells, num_nodes);
    let inv_v = 1.0 / num_nodes as f64;

    let mut values = vec![0.0f64; num_nodes * num_labels];
    let mut offsets = vec![0.0f64; num_nodes];
    values
        .par_chunks_mut(num_labels)
        .zip(offsets.par_iter_mut())
        .enumerate()
        .for_each(|(node, (row, offset))| {
            for (l, &d) in labels.vectors.iter().enumerate() {
                let ov = shifted_overlap_count(source, target, &grouped, node, d, c);
                row[l] = inv_v - 2.0 * ov as f64 / denom;
            }
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            for v in row.iter_mut() {
                *v -= lo;
            }
            *offset = lo;
        });

    Ok(LossTable {
        num_nodes,
        num_labels,
        values,
        offsets,
    })
}

/// Applies a labeling as a patchwise-constant shift: each voxel samples the
/// source mask displaced by its cell's label vector. This is the g(S, D)
/// used by the surrogate, exposed for oracle tests and zero-loss checks.
pub fn apply_patchwise_shift(
    source: &SegMask,
    grid: &ControlGrid,
    labeling: &DeformationLabeling,
    labels: &DisplacementLabelSet,
) -> SegMask {
    let geom = source.geom;
    let cells = voxel_cells(&geom, grid);
    let mut out = vec![0u8; geom.voxel_count()];
    for z in 0..geom.dims[2] {
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                let idx = geom.index(x, y, z);
                let d = labels.vectors[labeling.labels[cells[idx]]];
                let p = geom.position(x, y, z);
                let [sx, sy, sz] =
                    geom.nearest_voxel([p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
                out[idx] = source.at(sx, sy, sz);
            }
        }
    }
    SegMask { geom, labels: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{build_grid, build_label_set};
    use crate::volume::Geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(d: usize) -> Geometry {
        Geometry::new([d, d, d], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn random_mask(g: Geometry, classes: u8, rng: &mut ChaCha8Rng) -> SegMask {
        SegMask::new(g, (0..g.voxel_count()).map(|_| rng.gen_range(0..classes)).collect())
            .unwrap()
    }

    #[test]
    fn exact_dice_basics() {
        let g = geom(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_mask(g, 3, &mut rng);
        assert_eq!(exact_dice(&a, &a, 1).unwrap(), 1.0);

        // disjoint supports
        let mut la = vec![0u8; 64];
        let mut lb = vec![0u8; 64];
        la[0] = 1;
        la[1] = 1;
        lb[10] = 1;
        let a = SegMask::new(g, la).unwrap();
        let b = SegMask::new(g, lb).unwrap();
        assert_eq!(exact_dice(&a, &b, 1).unwrap(), 0.0);

        // |A|=4, |B|=4, overlap 2 -> 0.5
        let mut la = vec![0u8; 64];
        let mut lb = vec![0u8; 64];
        for i in 0..4 {
            la[i] = 1;
            lb[i + 2] = 1;
        }
        let a = SegMask::new(g, la).unwrap();
        let b = SegMask::new(g, lb).unwrap();
        assert_eq!(exact_dice(&a, &b, 1).unwrap(), 0.5);

        // both empty of the class
        let z = SegMask::new(g, vec![0u8; 64]).unwrap();
        assert_eq!(exact_dice(&z, &z, 7).unwrap(), 1.0);
    }

    #[test]
    fn exact_dice_rejects_geometry_mismatch() {
        let a = SegMask::new(geom(4), vec![0; 64]).unwrap();
        let b = SegMask::new(geom(5), vec![0; 125]).unwrap();
        assert!(matches!(
            exact_dice(&a, &b, 0),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn surrogate_zero_for_aligned_masks() {
        let g = geom(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mask(g, 2, &mut rng);
        let grid = build_grid(&g, 4.0).unwrap();
        let labels = build_label_set(1.0, 3).unwrap();
        let zero = DeformationLabeling::zeros(&grid, &labels);
        let loss = surrogate_loss(&m, &m, &grid, &zero, &labels, 1).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn surrogate_one_when_target_empty() {
        let g = geom(6);
        let mut src = vec![0u8; 216];
        src[40] = 1;
        src[41] = 1;
        let source = SegMask::new(g, src).unwrap();
        let target = SegMask::new(g, vec![0u8; 216]).unwrap();
        let grid = build_grid(&g, 3.0).unwrap();
        let labels = build_label_set(1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let labeling = DeformationLabeling {
                labels: (0..grid.num_nodes())
                    .map(|_| rng.gen_range(0..labels.len()))
                    .collect(),
            };
            let loss =
                surrogate_loss(&source, &target, &grid, &labeling, &labels, 1).unwrap();
            assert_eq!(loss, 1.0);
        }
    }

    #[test]
    fn surrogate_matches_voxel_oracle() {
        let g = geom(7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = build_grid(&g, 3.0).unwrap();
        let labels = build_label_set(2.0, 3).unwrap();
        for _ in 0..10 {
            let source = random_mask(g, 2, &mut rng);
            let target = random_mask(g, 2, &mut rng);
            let labeling = DeformationLabeling {
                labels: (0..grid.num_nodes())
                    .map(|_| rng.gen_range(0..labels.len()))
                    .collect(),
            };
            let got = surrogate_loss(&source, &target, &grid, &labeling, &labels, 1).unwrap();

            // brute-force voxel shifting with the same rule
            let cells = voxel_cells(&g, &grid);
            let mut overlap = 0usize;
            for z in 0..7 {
                for y in 0..7 {
                    for x in 0..7 {
                        let idx = g.index(x, y, z);
                        if target.labels[idx] != 1 {
                            continue;
                        }
                        let d = labels.vectors[labeling.labels[cells[idx]]];
                        let p = g.position(x, y, z);
                        let [sx, sy, sz] =
                            g.nearest_voxel([p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
                        if source.at(sx, sy, sz) == 1 {
                            overlap += 1;
                        }
                    }
                }
            }
            let denom = (source.class_count(1) + target.class_count(1)) as f64;
            let want = 1.0 - 2.0 * overlap as f64 / denom;
            assert!((got - want).abs() < 1e-12);
            assert!((0.0..=1.0 + 1e-12).contains(&got));
        }
    }

    #[test]
    fn loss_table_reproduces_surrogate() {
        let g = geom(7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let source = random_mask(g, 2, &mut rng);
        let target = random_mask(g, 2, &mut rng);
        let grid = build_grid(&g, 3.0).unwrap();
        let labels = build_label_set(2.0, 3).unwrap();
        let table = build_loss_table(&source, &target, &grid, &labels, 1).unwrap();
        assert!(table.values.iter().all(|&v| v >= 0.0));
        for _ in 0..20 {
            let labeling = DeformationLabeling {
                labels: (0..grid.num_nodes())
                    .map(|_| rng.gen_range(0..labels.len()))
                    .collect(),
            };
            let via_table = table.evaluate(&labeling);
            let direct =
                surrogate_loss(&source, &target, &grid, &labeling, &labels, 1).unwrap();
            assert!((via_table - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_table_absent_class_is_zero() {
        let g = geom(6);
        let m = SegMask::new(g, vec![0u8; 216]).unwrap();
        let grid = build_grid(&g, 3.0).unwrap();
        let labels = build_label_set(1.0, 3).unwrap();
        let table = build_loss_table(&m, &m, &grid, &labels, 5).unwrap();
        assert!(table.all_zero());
        let zero = DeformationLabeling::zeros(&grid, &labels);
        assert_eq!(table.evaluate(&zero), 0.0);
    }

    #[test]
    fn loss_table_single_node_spans_loss_range() {
        let g = geom(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let source = random_mask(g, 2, &mut rng);
        let target = random_mask(g, 2, &mut rng);
        // single node owning every voxel
        let grid = crate::deform::ControlGrid::lattice([1, 1, 1], 50.0, [2.0, 2.0, 2.0]);
        let labels = build_label_set(2.0, 3).unwrap();
        let table = build_loss_table(&source, &target, &grid, &labels, 1).unwrap();
        let mut losses = Vec::new();
        for l in 0..labels.len() {
            let labeling = DeformationLabeling { labels: vec![l] };
            losses.push(
                surrogate_loss(&source, &target, &grid, &labeling, &labels, 1).unwrap(),
            );
        }
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let entries: Vec<f64> = (0..labels.len()).map(|l| table.entry(0, l)).collect();
        let emin = entries.iter().cloned().fold(f64::INFINITY, f64::min);
        let emax = entries.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(emin.abs() < 1e-12);
        assert!((emax - (max - min)).abs() < 1e-9);
    }

    #[test]
    fn zero_surrogate_iff_shifted_dice_one() {
        // count-preserving construction: an interior blob and a constant
        // one-voxel translation so clamping never touches the class support
        let g = geom(8);
        let grid = build_grid(&g, 4.0).unwrap();
        let labels = build_label_set(2.0, 3).unwrap();
        let mut src = vec![0u8; 512];
        for z in 3..6 {
            for y in 3..6 {
                for x in 3..6 {
                    src[g.index(x, y, z)] = 1;
                }
            }
        }
        let source = SegMask::new(g, src).unwrap();
        let shift_label = labels
            .vectors
            .iter()
            .position(|v| v == &[2.0, 0.0, 0.0])
            .unwrap();
        let truth = DeformationLabeling {
            labels: vec![shift_label; grid.num_nodes()],
        };
        let target = apply_patchwise_shift(&source, &grid, &truth, &labels);
        assert_eq!(source.class_count(1), target.class_count(1));

        let loss = surrogate_loss(&source, &target, &grid, &truth, &labels, 1).unwrap();
        let dice =
            exact_dice(&apply_patchwise_shift(&source, &grid, &truth, &labels), &target, 1)
                .unwrap();
        assert_eq!(dice, 1.0);
        assert!(loss.abs() < 1e-9);

        // a misaligned labeling has dice < 1 and positive loss
        let zero = DeformationLabeling::zeros(&grid, &labels);
        let bad = surrogate_loss(&source, &target, &grid, &zero, &labels, 1).unwrap();
        let bad_dice =
            exact_dice(&apply_patchwise_shift(&source, &grid, &zero, &labels), &target, 1)
                .unwrap();
        assert!(bad_dice < 1.0);
        assert!(bad > 0.0);
    }

    #[test]
    fn ranking_agrees_with_exact_dice_of_shifts() {
        let g = geom(8);
        let grid = build_grid(&g, 4.0).unwrap();
        let labels = build_label_set(2.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // blob-like masks give a meaningful ranking
        let mut src = vec![0u8; 512];
        for z in 2..6 {
            for y in 2..6 {
                for x in 2..6 {
                    src[g.index(x, y, z)] = 1;
                }
            }
        }
        let source = SegMask::new(g, src).unwrap();
        let truth = DeformationLabeling {
            labels: (0..grid.num_nodes())
                .map(|_| rng.gen_range(0..labels.len()))
                .collect(),
        };
        let target = apply_patchwise_shift(&source, &grid, &truth, &labels);

        let mut pairs = Vec::new();
        for _ in 0..30 {
            let labeling = DeformationLabeling {
                labels: (0..grid.num_nodes())
                    .map(|_| rng.gen_range(0..labels.len()))
                    .collect(),
            };
            let s = surrogate_loss(&source, &target, &grid, &labeling, &labels, 1).unwrap();
            let d = 1.0
                - exact_dice(
                    &apply_patchwise_shift(&source, &grid, &labeling, &labels),
                    &target,
                    1,
                )
                .unwrap();
            pairs.push((s, d));
        }
        // Spearman-style rank correlation > 0.9 (smoke check, not a theorem)
        let rank = |vals: Vec<f64>| -> Vec<f64> {
            let mut idx: Vec<usize> = (0..vals.len()).collect();
            idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
            let mut r = vec![0.0; vals.len()];
            for (pos, &i) in idx.iter().enumerate() {
                r[i] = pos as f64;
            }
            r
        };
        let ra = rank(pairs.iter().map(|p| p.0).collect());
        let rb = rank(pairs.iter().map(|p| p.1).collect());
        let n = ra.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..ra.len() {
            cov += (ra[i] - ma) * (rb[i] - mb);
            va += (ra[i] - ma).powi(2);
            vb += (rb[i] - mb).powi(2);
        }
        let rho = cov / (va.sqrt() * vb.sqrt());
        assert!(rho > 0.9, "rank correlation {rho}");
    }
}
