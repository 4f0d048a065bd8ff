//! Point spread function probing: batches of well-separated discrete deltas,
//! window extraction of the responses, and assembly of the product-convolution
//! operator as a low-rank symbol whose rows are the PSF spectra.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::fft::forward_transform;
use crate::grid::{Field, Grid2D};
use crate::psido::{LinearOperator, LowRankSymbol};

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Sample points for PSF extraction, grouped into probe batches whose
/// extraction windows cannot overlap.
#[derive(Debug, Clone)]
pub struct PsfProbePlan {
    /// Grid indices (ix, iz) of the sample points, lattice row-major.
    pub points: Vec<(usize, usize)>,
    /// Indices into `points`, one batch per probe application.
    pub batches: Vec<Vec<usize>>,
    /// Half-width of the square extraction window, in cells.
    pub extraction_radius: usize,
    /// Node coordinates of the regular sample lattice.
    pub nodes_x: Vec<usize>,
    pub nodes_z: Vec<usize>,
}

/// Periodic per-axis cell distance.
fn wrapped_axis_dist(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

impl PsfProbePlan {
    /// Regular n_px-by-n_pz lattice of sample points with the given extraction
    /// radius. Points keep a boundary margin of at least `radius` cells and are
    /// batched checkerboard-style (every second lattice node per axis), so each
    /// batch is separated by twice the lattice spacing.
    pub fn regular(grid: &Grid2D, n_px: usize, n_pz: usize, radius: usize) -> Result<Self> {
        assert!(n_px >= 1 && n_pz >= 1);
        let nodes_x = lattice_nodes(grid.nx, n_px, radius)?;
        let nodes_z = lattice_nodes(grid.nz, n_pz, radius)?;
        let mut points = Vec::with_capacity(n_px * n_pz);
        for &jz in &nodes_z {
            for &jx in &nodes_x {
                points.push((jx, jz));
            }
        }
        let mut batches: Vec<Vec<usize>> = vec![Vec::new(); 4];
        for (li, _) in points.iter().enumerate() {
            let (i, j) = (li % n_px, li / n_px);
            batches[(i % 2) + 2 * (j % 2)].push(li);
        }
        batches.retain(|b| !b.is_empty());
        let plan = Self {
            points,
            batches,
            extraction_radius: radius,
            nodes_x,
            nodes_z,
        };
        plan.validate_separation(grid)?;
        Ok(plan)
    }

    /// Checks the within-batch separation rule: periodic Chebyshev distance of
    /// at least 2*radius + 1 cells, so extraction windows are disjoint.
    pub fn validate_separation(&self, grid: &Grid2D) -> Result<()> {
        let required = 2 * self.extraction_radius + 1;
        for batch in &self.batches {
            for (i, &a) in batch.iter().enumerate() {
                for &b in &batch[i + 1..] {
                    let pa = self.points[a];
                    let pb = self.points[b];
                    let dist = wrapped_axis_dist(pa.0, pb.0, grid.nx)
                        .max(wrapped_axis_dist(pa.1, pb.1, grid.nz));
                    if dist < required {
                        return Err(CoreError::SeparationViolated {
                            a: pa,
                            b: pb,
                            dist,
                            required,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn lattice_nodes(n: usize, count: usize, margin: usize) -> Result<Vec<usize>> {
    let lo = margin;
    let hi = n.checked_sub(1 + margin).ok_or_else(|| {
        CoreError::InvalidGrid(format!("margin {margin} too large for {n} cells"))
    })?;
    if hi < lo {
        return Err(CoreError::InvalidGrid(format!(
            "margin {margin} leaves no room on {n} cells"
        )));
    }
    if count == 1 {
        return Ok(vec![(lo + hi) / 2]);
    }
    let nodes: Vec<usize> = (0..count)
        .map(|i| lo + ((hi - lo) as f64 * i as f64 / (count - 1) as f64).round() as usize)
        .collect();
    for w in nodes.windows(2) {
        if w[1] <= w[0] {
            return Err(CoreError::InvalidGrid(format!(
                "{count} lattice nodes do not fit in [{lo}, {hi}]"
            )));
        }
    }
    Ok(nodes)
}

/// One probe field per batch: discrete deltas of weight 1/(dx*dz) at the
/// batch's points.
pub fn build_delta_probes(plan: &PsfProbePlan, grid: &Grid2D) -> Result<Vec<Field>> {
    plan.validate_separation(grid)?;
    let w = 1.0 / grid.cell_area();
    let mut probes = Vec::with_capacity(plan.batches.len());
    for batch in &plan.batches {
        let mut f = Field::zeros(*grid);
        for &pi in batch {
            let (ix, iz) = plan.points[pi];
            f.values[grid.checked_idx(ix, iz)?] = w;
        }
        probes.push(f);
    }
    Ok(probes)
}

/// Extracted PSFs (re-centered to the origin, zero outside the window) and
/// their symbol rows s(x_k, .) = (2*pi)^2 * conj(fft(p_k)).
#[derive(Debug, Clone)]
pub struct PsfSet {
    pub plan: PsfProbePlan,
    pub psfs: Vec<Field>,
    pub symbol_rows: DMatrix<Complex64>,
}

/// Pulls each point's window out of its batch response. The window of
/// half-width `radius` centered at x_k is re-centered so p_k(x) represents
/// H delta_{x_k}(x_k + x), wrapping periodically.
pub fn extract_psfs(plan: &PsfProbePlan, grid: &Grid2D, responses: &[Field]) -> Result<PsfSet> {
    if responses.len() != plan.batches.len() {
        return Err(CoreError::InvalidGrid(format!(
            "{} responses for {} batches",
            responses.len(),
            plan.batches.len()
        )));
    }
    let r = plan.extraction_radius as i64;
    let (nx, nz) = (grid.nx as i64, grid.nz as i64);
    let mut psfs = vec![Field::zeros(*grid); plan.points.len()];
    for (batch, resp) in plan.batches.iter().zip(responses) {
        grid.check_match(&resp.grid)?;
        for &pi in batch {
            let (cx, cz) = plan.points[pi];
            for tz in -r..=r {
                for tx in -r..=r {
                    let src_x = (cx as i64 + tx).rem_euclid(nx) as usize;
                    let src_z = (cz as i64 + tz).rem_euclid(nz) as usize;
                    let dst_x = tx.rem_euclid(nx) as usize;
                    let dst_z = tz.rem_euclid(nz) as usize;
                    psfs[pi].values[grid.idx(dst_x, dst_z)] =
                        resp.values[grid.idx(src_x, src_z)];
                }
            }
        }
    }
    let n = grid.n();
    let mut symbol_rows = DMatrix::zeros(plan.points.len(), n);
    for (k, p) in psfs.iter().enumerate() {
        let hat = forward_transform(p);
        for j in 0..n {
            symbol_rows[(k, j)] = hat.values[j].conj() * TAU.powi(2);
        }
    }
    Ok(PsfSet {
        plan: plan.clone(),
        psfs,
        symbol_rows,
    })
}

/// Runs the whole PSF probing pass against an operator: one apply per batch.
pub fn psf_probe(op: &dyn LinearOperator, plan: &PsfProbePlan) -> Result<PsfSet> {
    let grid = op.grid();
    let probes = build_delta_probes(plan, &grid)?;
    let responses: Vec<Field> = probes.iter().map(|p| op.apply(p)).collect();
    extract_psfs(plan, &grid, &responses)
}

/// Bilinear hat interpolation weights on the sample lattice: a partition of
/// unity (clamped beyond the hull, so it sums to one everywhere), with
/// w_k(x_j) = delta_kj at the sample points.
pub fn build_psf_weights(plan: &PsfProbePlan, grid: &Grid2D) -> Vec<Field> {
    let wx = axis_hats(&plan.nodes_x, grid.nx);
    let wz = axis_hats(&plan.nodes_z, grid.nz);
    let (npx, npz) = (plan.nodes_x.len(), plan.nodes_z.len());
    let mut weights = Vec::with_capacity(plan.points.len());
    for j in 0..npz {
        for i in 0..npx {
            let mut f = Field::zeros(*grid);
            for iz in 0..grid.nz {
                for ix in 0..grid.nx {
                    f.values[grid.idx(ix, iz)] = wx[i][ix] * wz[j][iz];
                }
            }
            weights.push(f);
        }
    }
    weights
}

/// 1D hat functions over lattice nodes, clamped to the end nodes outside the
/// hull. hats[k][i] is node k's weight at cell i.
fn axis_hats(nodes: &[usize], n: usize) -> Vec<Vec<f64>> {
    let m = nodes.len();
    let mut hats = vec![vec![0.0; n]; m];
    for i in 0..n {
        if m == 1 || i <= nodes[0] {
            hats[0][i] += 1.0;
            continue;
        }
        if i >= nodes[m - 1] {
            hats[m - 1][i] += 1.0;
            continue;
        }
        let seg = nodes.windows(2).position(|w| w[0] <= i && i < w[1]).unwrap();
        let (a, b) = (nodes[seg] as f64, nodes[seg + 1] as f64);
        let t = (i as f64 - a) / (b - a);
        hats[seg][i] += 1.0 - t;
        hats[seg + 1][i] += t;
    }
    hats
}

/// Assembles the product-convolution operator as a low-rank symbol:
/// a_k = w_k, b_k = the PSF symbol rows.
pub fn assemble_psf_operator(set: &PsfSet, weights: &[Field]) -> Result<LowRankSymbol> {
    if weights.len() != set.psfs.len() {
        return Err(CoreError::InvalidGrid(format!(
            "{} weights for {} PSFs",
            weights.len(),
            set.psfs.len()
        )));
    }
    let grid = weights[0].grid;
    let n = grid.n();
    let freq: Vec<Vec<Complex64>> = (0..set.symbol_rows.nrows())
        .map(|k| (0..n).map(|j| set.symbol_rows[(k, j)]).collect())
        .collect();
    LowRankSymbol::new(grid, weights.to_vec(), freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::freq_coords;
    use crate::psido::{FnOperator, PsidoOperator};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid(nx: usize, nz: usize) -> Grid2D {
        Grid2D::new(nx, nz, 1.0, 1.0).unwrap()
    }

    fn random_field(g: Grid2D, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field {
            grid: g,
            values: (0..g.n()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn thirty_six_points_make_four_probes() {
        let g = grid(64, 64);
        let plan = PsfProbePlan::regular(&g, 6, 6, 4).unwrap();
        assert_eq!(plan.points.len(), 36);
        let probes = build_delta_probes(&plan, &g).unwrap();
        assert_eq!(probes.len(), 4);
        for b in &plan.batches {
            assert_eq!(b.len(), 9);
        }
    }

    #[test]
    fn single_point_probe_integrates_to_one() {
        let g = Grid2D::new(16, 16, 0.5, 2.0).unwrap();
        let plan = PsfProbePlan::regular(&g, 1, 1, 3).unwrap();
        let probes = build_delta_probes(&plan, &g).unwrap();
        assert_eq!(probes.len(), 1);
        let total: f64 = probes[0].values.iter().sum::<f64>() * g.cell_area();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn close_points_rejected() {
        let g = grid(16, 16);
        let plan = PsfProbePlan {
            points: vec![(4, 4), (6, 4)],
            batches: vec![vec![0, 1]],
            extraction_radius: 3,
            nodes_x: vec![4, 6],
            nodes_z: vec![4],
        };
        assert!(matches!(
            build_delta_probes(&plan, &g),
            Err(CoreError::SeparationViolated { .. })
        ));
    }

    #[test]
    fn identity_operator_gives_delta_psfs_and_unit_rows() {
        let g = grid(32, 32);
        let plan = PsfProbePlan::regular(&g, 3, 3, 4).unwrap();
        let id = FnOperator::new(g, |v| v.clone());
        let set = psf_probe(&id, &plan).unwrap();
        for (k, p) in set.psfs.iter().enumerate() {
            let at_origin = p.values[0];
            assert!((at_origin - 1.0 / g.cell_area()).abs() < 1e-12, "psf {k}");
            let off: f64 = p.values[1..].iter().map(|v| v.abs()).sum();
            assert!(off < 1e-12);
        }
        for v in set.symbol_rows.iter() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-10);
        }
    }

    #[test]
    fn fourier_multiplier_rows_recover_the_multiplier() {
        let g = grid(64, 64);
        let fg = freq_coords(&g);
        // Smooth multiplier with a rapidly decaying kernel.
        let q: Vec<f64> = (0..g.n())
            .map(|i| {
                let (jx, jz) = (i % g.nx, i / g.nx);
                (-fg.magnitude(jx, jz).powi(2)).exp()
            })
            .collect();
        let qc: Vec<Complex64> = q.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let op = PsidoOperator::new(LowRankSymbol::multiplier(g, qc).unwrap(), false);
        let plan = PsfProbePlan::regular(&g, 6, 6, 5).unwrap();
        let set = psf_probe(&op, &plan).unwrap();
        for k in 0..set.psfs.len() {
            for j in 0..g.n() {
                if q[j] > 0.05 {
                    let got = set.symbol_rows[(k, j)];
                    let rel = (got - Complex64::new(q[j], 0.0)).norm() / q[j];
                    assert!(rel < 0.01, "row {k} freq {j}: {got} vs {}", q[j]);
                }
            }
        }
    }

    #[test]
    fn batched_probing_matches_single_point_probing_for_local_operator() {
        let g = grid(48, 48);
        // Exactly local operator: periodic convolution supported in radius 3.
        let radius = 4i64;
        let kernel = |tx: i64, tz: i64| -> f64 {
            if tx.abs() <= 3 && tz.abs() <= 3 {
                (-(tx * tx + tz * tz) as f64 / 4.0).exp()
            } else {
                0.0
            }
        };
        let op = FnOperator::new(g, move |v| {
            let mut out = Field::zeros(g);
            for iz in 0..g.nz as i64 {
                for ix in 0..g.nx as i64 {
                    let mut acc = 0.0;
                    for tz in -3..=3 {
                        for tx in -3..=3 {
                            let sx = (ix + tx).rem_euclid(g.nx as i64) as usize;
                            let sz = (iz + tz).rem_euclid(g.nz as i64) as usize;
                            acc += kernel(tx, tz) * v.values[g.idx(sx, sz)];
                        }
                    }
                    out.values[g.idx(ix as usize, iz as usize)] = acc;
                }
            }
            out
        });
        let plan = PsfProbePlan::regular(&g, 4, 4, radius as usize).unwrap();
        let set = psf_probe(&op, &plan).unwrap();

        // One point per probe.
        let single = PsfProbePlan {
            points: plan.points.clone(),
            batches: (0..plan.points.len()).map(|i| vec![i]).collect(),
            extraction_radius: plan.extraction_radius,
            nodes_x: plan.nodes_x.clone(),
            nodes_z: plan.nodes_z.clone(),
        };
        let set_single = psf_probe(&op, &single).unwrap();
        for k in 0..plan.points.len() {
            let d = set.psfs[k].sub(&set_single.psfs[k]).max_abs();
            assert!(d < 1e-12, "psf {k} differs by {d}");
        }
    }

    #[test]
    fn weights_partition_unity_and_interpolate() {
        let g = grid(64, 64);
        let plan = PsfProbePlan::regular(&g, 6, 6, 4).unwrap();
        let weights = build_psf_weights(&plan, &g);

        // Sum to one everywhere, delta property at sample points.
        for iz in 0..g.nz {
            for ix in 0..g.nx {
                let s: f64 = weights.iter().map(|w| w.at(ix, iz)).sum();
                assert!((s - 1.0).abs() < 1e-12, "at ({ix},{iz}): {s}");
            }
        }
        for (k, &(px, pz)) in plan.points.iter().enumerate() {
            for (j, w) in weights.iter().enumerate() {
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((w.at(px, pz) - want).abs() < 1e-12);
            }
        }
        for w in &weights {
            assert!(w.values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn one_point_weight_is_constant_one_and_two_points_split_midpoint() {
        let g = grid(16, 16);
        let single = PsfProbePlan::regular(&g, 1, 1, 2).unwrap();
        let w = build_psf_weights(&single, &g);
        assert_eq!(w.len(), 1);
        assert!(w[0].values.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let two = PsfProbePlan {
            points: vec![(4, 8), (12, 8)],
            batches: vec![vec![0], vec![1]],
            extraction_radius: 2,
            nodes_x: vec![4, 12],
            nodes_z: vec![8],
        };
        let w = build_psf_weights(&two, &g);
        assert!((w[0].at(8, 3) - 0.5).abs() < 1e-15);
        assert!((w[1].at(8, 3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn product_convolution_identity_against_direct_correlation() {
        let g = grid(32, 32);
        // A mildly x-varying smooth operator to probe.
        let fg = freq_coords(&g);
        let a = Field::from_fn(g, |x, _| 1.0 + 0.2 * (TAU * x / g.x_max()).cos());
        let b: Vec<Complex64> = (0..g.n())
            .map(|i| {
                let (jx, jz) = (i % g.nx, i / g.nx);
                Complex64::new((-fg.magnitude(jx, jz).powi(2) / 2.0).exp(), 0.0)
            })
            .collect();
        let sym = LowRankSymbol::new(g, vec![a], vec![b]).unwrap();
        let op = PsidoOperator::new(sym, false);

        let plan = PsfProbePlan::regular(&g, 4, 4, 4).unwrap();
        let set = psf_probe(&op, &plan).unwrap();
        let weights = build_psf_weights(&plan, &g);
        let assembled = assemble_psf_operator(&set, &weights).unwrap();

        let v = random_field(g, 31);
        let fast = assembled.apply(&v).unwrap();

        // Direct per-term path: w_k .* (p_k cross-correlated with v), summed
        // in the spatial domain with periodic wrap. This is the
        // convolution-theorem identity the fast apply must reproduce.
        let mut slow = Field::zeros(g);
        for (p, w) in set.psfs.iter().zip(&weights) {
            for iz in 0..g.nz as i64 {
                for ix in 0..g.nx as i64 {
                    let mut acc = 0.0;
                    for tz in 0..g.nz as i64 {
                        for tx in 0..g.nx as i64 {
                            // offset coordinates of p wrap around the origin
                            let vx = (ix + tx).rem_euclid(g.nx as i64) as usize;
                            let vz = (iz + tz).rem_euclid(g.nz as i64) as usize;
                            acc += p.values[g.idx(tx as usize, tz as usize)]
                                * v.values[g.idx(vx, vz)];
                        }
                    }
                    let i = g.idx(ix as usize, iz as usize);
                    slow.values[i] += w.values[i] * acc * g.cell_area();
                }
            }
        }
        let scale = fast.max_abs().max(1e-30);
        for i in 0..g.n() {
            assert!(
                (fast.values[i] - slow.values[i]).abs() < 1e-10 * scale,
                "at {i}: {} vs {}",
                fast.values[i],
                slow.values[i]
            );
        }
    }

    #[test]
    fn identity_probe_set_reassembles_identity_on_hull() {
        let g = grid(32, 32);
        let id = FnOperator::new(g, |v| v.clone());
        let plan = PsfProbePlan::regular(&g, 4, 4, 3).unwrap();
        let set = psf_probe(&id, &plan).unwrap();
        let weights = build_psf_weights(&plan, &g);
        let assembled = assemble_psf_operator(&set, &weights).unwrap();
        let v = random_field(g, 8);
        let out = assembled.apply(&v).unwrap();
        let err = out.sub(&v).norm() / v.norm();
        assert!(err < 0.01, "identity reassembly error {err}");
    }
}
