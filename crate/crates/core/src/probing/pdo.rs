//! Pseudo-differential operator probing: applies the operator to a sum of
//! sinusoids, separates the response spectrum into clusters around each
//! sample frequency, and reads off symbol columns. The columns are then
//! extended over all of frequency space by linear radial scaling and
//! trigonometric angular interpolation.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::fft::{forward_transform, inverse_transform_complex};
use crate::grid::{freq_coords, Field, FreqGrid, Grid2D};
use crate::psido::{LinearOperator, LowRankSymbol};

/// How to pick the probe circle radius rho0.
#[derive(Debug, Clone, Copy)]
pub enum FrequencyChoice {
    Explicit { rho0: f64 },
    /// Source band [f_min, f_max] and velocity range [c_min, c_max]; valid
    /// when f_max/f_min > c_max/c_min, with rho0 = f_max/c_max.
    Band {
        f_min: f64,
        f_max: f64,
        c_min: f64,
        c_max: f64,
    },
}

/// Probe frequencies on a circle of radius rho0, snapped to the grid
/// frequency lattice in antipodal pairs.
#[derive(Debug, Clone)]
pub struct PdoProbePlan {
    pub rho0: f64,
    /// Snapped frequency index pairs, antipodes at k and k + n/2.
    pub freq_indices: Vec<(usize, usize)>,
    /// Snapped physical frequency vectors (xi_x, xi_z).
    pub freqs: Vec<(f64, f64)>,
    /// Spectral separation radius (physical units); clusters of different
    /// columns stay at least 2*mask_radius apart.
    pub mask_radius: f64,
}

impl PdoProbePlan {
    pub fn n_angles(&self) -> usize {
        self.freq_indices.len()
    }

    /// Snapped radius |xi_k| of sample k.
    pub fn radius(&self, k: usize) -> f64 {
        let (x, z) = self.freqs[k];
        (x * x + z * z).sqrt()
    }

    /// Snapped angle of sample k.
    pub fn angle(&self, k: usize) -> f64 {
        let (x, z) = self.freqs[k];
        z.atan2(x)
    }
}

fn snap_to_grid(fg: &FreqGrid, target: (f64, f64)) -> Result<(usize, usize)> {
    let g = fg.grid;
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for jz in 0..g.nz {
        for jx in 0..g.nx {
            // Skip Nyquist rows/columns so every snapped point has an exact
            // negation on the lattice, and skip DC.
            if g.nx % 2 == 0 && jx == g.nx / 2 {
                continue;
            }
            if g.nz % 2 == 0 && jz == g.nz / 2 {
                continue;
            }
            if jx == 0 && jz == 0 {
                continue;
            }
            let dx = fg.xi_x[jx] - target.0;
            let dz = fg.xi_z[jz] - target.1;
            let d = dx * dx + dz * dz;
            if d < best_d {
                best_d = d;
                best = Some((jx, jz));
            }
        }
    }
    best.ok_or_else(|| CoreError::InvalidGrid("no snappable frequency cell".into()))
}

/// Picks n_angles equally spaced sample frequencies on the rho0 circle,
/// antipodally paired and snapped to the grid, with the maximal
/// non-overlapping mask radius.
pub fn choose_probe_frequencies(
    grid: &Grid2D,
    choice: FrequencyChoice,
    n_angles: usize,
) -> Result<PdoProbePlan> {
    assert!(n_angles >= 2 && n_angles % 2 == 0, "angles must come in antipodal pairs");
    let rho0 = match choice {
        FrequencyChoice::Explicit { rho0 } => rho0,
        FrequencyChoice::Band {
            f_min,
            f_max,
            c_min,
            c_max,
        } => {
            let f_ratio = f_max / f_min;
            let c_ratio = c_max / c_min;
            if f_ratio <= c_ratio {
                return Err(CoreError::BandTooNarrow { f_ratio, c_ratio });
            }
            f_max / c_max
        }
    };
    assert!(rho0 > 0.0);

    let fg = freq_coords(grid);
    let half = n_angles / 2;
    let mut freq_indices = vec![(0usize, 0usize); n_angles];
    for k in 0..half {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / n_angles as f64;
        let target = (rho0 * theta.cos(), rho0 * theta.sin());
        let (jx, jz) = snap_to_grid(&fg, target)?;
        freq_indices[k] = (jx, jz);
        // Exact negation on the lattice.
        freq_indices[k + half] = ((grid.nx - jx) % grid.nx, (grid.nz - jz) % grid.nz);
    }

    // Snapping must keep the samples distinct.
    for i in 0..n_angles {
        for j in i + 1..n_angles {
            if freq_indices[i] == freq_indices[j] {
                return Err(CoreError::InvalidGrid(format!(
                    "frequency samples {i} and {j} collide after snapping; \
                     grid too coarse for {n_angles} angles at rho0 = {rho0}"
                )));
            }
        }
    }

    let freqs: Vec<(f64, f64)> = freq_indices
        .iter()
        .map(|&(jx, jz)| (fg.xi_x[jx], fg.xi_z[jz]))
        .collect();

    let mut min_dist = f64::INFINITY;
    for i in 0..n_angles {
        for j in i + 1..n_angles {
            min_dist = min_dist.min(fg.wrapped_distance(freq_indices[i], freq_indices[j]));
        }
    }
    Ok(PdoProbePlan {
        rho0,
        freq_indices,
        freqs,
        mask_radius: min_dist / 2.0,
    })
}

/// The real probing vector v_p(x) = sum_k e^{i x.xi_k} = 2 sum over half the
/// angles of cos(x.xi_k).
pub fn build_sinusoid_probe(plan: &PdoProbePlan, grid: &Grid2D) -> Field {
    let half = plan.n_angles() / 2;
    Field::from_fn(*grid, |x, z| {
        let mut acc = 0.0;
        for k in 0..half {
            let (fx, fz) = plan.freqs[k];
            acc += 2.0 * (fx * x + fz * z).cos();
        }
        acc
    })
}

/// Symbol columns s(., xi_k) extracted from one operator application.
#[derive(Debug, Clone)]
pub struct SymbolColumns {
    pub plan: PdoProbePlan,
    /// N x n_angles complex column matrix.
    pub cols: DMatrix<Complex64>,
}

/// Separates the response spectrum into per-sample clusters (disc masks with
/// a cosine rolloff), inverts each, and divides out the probing sinusoid.
pub fn extract_symbol_columns(
    plan: &PdoProbePlan,
    response: &Field,
) -> Result<SymbolColumns> {
    let grid = response.grid;
    let fg = freq_coords(&grid);
    let hat = forward_transform(response);
    let n = grid.n();
    let r = plan.n_angles();
    let (dxx, dxz) = fg.cell();
    let rolloff = (2.0 * dxx.max(dxz)).min(plan.mask_radius / 2.0);
    let mut cols = DMatrix::zeros(n, r);
    for k in 0..r {
        let center = plan.freq_indices[k];
        let mut masked = crate::fft::Spectrum::zeros(grid);
        for jz in 0..grid.nz {
            for jx in 0..grid.nx {
                let d = fg.wrapped_distance((jx, jz), center);
                let w = if d <= plan.mask_radius - rolloff {
                    1.0
                } else if d < plan.mask_radius {
                    0.5 * (1.0
                        + (std::f64::consts::PI * (d - (plan.mask_radius - rolloff)) / rolloff)
                            .cos())
                } else {
                    0.0
                };
                if w > 0.0 {
                    let idx = grid.idx(jx, jz);
                    masked.values[idx] = hat.values[idx] * w;
                }
            }
        }
        let cluster = inverse_transform_complex(&masked);
        let (fx, fz) = plan.freqs[k];
        for iz in 0..grid.nz {
            for ix in 0..grid.nx {
                let (x, z) = grid.coords(ix, iz);
                let phase = Complex64::from_polar(1.0, -(fx * x + fz * z));
                cols[(grid.idx(ix, iz), k)] = cluster[grid.idx(ix, iz)] * phase;
            }
        }
    }
    Ok(SymbolColumns {
        plan: plan.clone(),
        cols,
    })
}

/// Runs the whole PDO probing pass: exactly one operator application.
pub fn pdo_probe(op: &dyn LinearOperator, plan: &PdoProbePlan) -> Result<SymbolColumns> {
    let probe = build_sinusoid_probe(plan, &op.grid());
    let response = op.apply(&probe);
    extract_symbol_columns(plan, &response)
}

/// Angular trigonometric interpolation through the snapped sample angles.
/// Returns per-sample coefficient vectors in the balanced basis
/// [1, cos t, sin t, ..., cos((n/2-1)t), sin((n/2-1)t), cos((n/2)t)].
fn angular_interpolant(plan: &PdoProbePlan) -> DMatrix<f64> {
    let n = plan.n_angles();
    let mut v = DMatrix::zeros(n, n);
    for (j, row) in (0..n).map(|j| (j, plan.angle(j))).enumerate() {
        let theta = row.1;
        for b in 0..n {
            v[(j, b)] = angular_basis(b, n, theta);
        }
    }
    v.try_inverse().expect("distinct snapped angles make the system nonsingular")
}

fn angular_basis(b: usize, n: usize, theta: f64) -> f64 {
    if b == 0 {
        1.0
    } else if b == n - 1 && n % 2 == 0 {
        ((n / 2) as f64 * theta).cos()
    } else {
        let harmonic = (b + 1) / 2;
        if b % 2 == 1 {
            (harmonic as f64 * theta).cos()
        } else {
            (harmonic as f64 * theta).sin()
        }
    }
}

/// Evaluates w_k on the whole frequency grid:
/// w_k(xi) = (|xi| / |xi_k|) * w_circle_k(arg xi), zero at xi = 0. The
/// circle interpolant satisfies w_k(xi_j) = delta_kj exactly at the samples.
pub fn build_pdo_weights(plan: &PdoProbePlan, grid: &Grid2D) -> Vec<Vec<Complex64>> {
    let fg = freq_coords(grid);
    let coefs = angular_interpolant(plan);
    let n_angles = plan.n_angles();
    let mut weights = Vec::with_capacity(n_angles);
    for k in 0..n_angles {
        let rho_k = plan.radius(k);
        let mut w = vec![Complex64::new(0.0, 0.0); grid.n()];
        for jz in 0..grid.nz {
            for jx in 0..grid.nx {
                let rho = fg.magnitude(jx, jz);
                if rho == 0.0 {
                    continue;
                }
                let theta = fg.angle(jx, jz);
                let mut circ = 0.0;
                for b in 0..n_angles {
                    circ += coefs[(b, k)] * angular_basis(b, n_angles, theta);
                }
                w[grid.idx(jx, jz)] = Complex64::new(rho / rho_k * circ, 0.0);
            }
        }
        weights.push(w);
    }
    weights
}

/// Evaluates w_k at a single physical frequency (for tests and row sampling).
pub fn eval_pdo_weight(plan: &PdoProbePlan, k: usize, xi: (f64, f64)) -> f64 {
    let coefs = angular_interpolant(plan);
    let rho = (xi.0 * xi.0 + xi.1 * xi.1).sqrt();
    if rho == 0.0 {
        return 0.0;
    }
    let theta = xi.1.atan2(xi.0);
    let n = plan.n_angles();
    let mut circ = 0.0;
    for b in 0..n {
        circ += coefs[(b, k)] * angular_basis(b, n, theta);
    }
    rho / plan.radius(k) * circ
}

/// Assembles the PDO operator: a_k = Re(columns), b_k = interpolation
/// weights. Returns the largest relative imaginary residual discarded from
/// the columns.
pub fn assemble_pdo_operator(
    columns: &SymbolColumns,
    weights: &[Vec<Complex64>],
    grid: &Grid2D,
) -> Result<(LowRankSymbol, f64)> {
    let r = columns.plan.n_angles();
    if weights.len() != r {
        return Err(CoreError::InvalidGrid(format!(
            "{} weights for {} columns",
            weights.len(),
            r
        )));
    }
    let n = grid.n();
    let peak = columns.cols.iter().fold(0.0f64, |m, c| m.max(c.norm()));
    let mut imag = 0.0f64;
    let mut spatial = Vec::with_capacity(r);
    for k in 0..r {
        let mut f = Field::zeros(*grid);
        for i in 0..n {
            let c = columns.cols[(i, k)];
            imag = imag.max(c.im.abs());
            f.values[i] = c.re;
        }
        spatial.push(f);
    }
    let residual = if peak > 0.0 { imag / peak } else { 0.0 };
    Ok((LowRankSymbol::new(*grid, spatial, weights.to_vec())?, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psido::FnOperator;

    const TAU: f64 = 2.0 * std::f64::consts::PI;

    fn grid(nx: usize, nz: usize) -> Grid2D {
        Grid2D::new(nx, nz, 1.0, 1.0).unwrap()
    }

    fn default_plan(g: &Grid2D) -> PdoProbePlan {
        choose_probe_frequencies(g, FrequencyChoice::Explicit { rho0: 1.3 }, 8).unwrap()
    }

    #[test]
    fn eight_angles_on_one_circle_with_antipodal_pairs() {
        let g = grid(64, 64);
        let plan = default_plan(&g);
        assert_eq!(plan.n_angles(), 8);
        for k in 0..4 {
            let (ax, az) = plan.freqs[k];
            let (bx, bz) = plan.freqs[k + 4];
            assert!((ax + bx).abs() < 1e-12 && (az + bz).abs() < 1e-12);
            // Snapped radius stays near the nominal circle.
            assert!((plan.radius(k) - plan.rho0).abs() < 0.15 * plan.rho0);
        }
        assert!(plan.mask_radius > 0.0);
    }

    #[test]
    fn narrow_band_rejected() {
        let g = grid(32, 32);
        let res = choose_probe_frequencies(
            &g,
            FrequencyChoice::Band {
                f_min: 10.0,
                f_max: 30.0,
                c_min: 1.0,
                c_max: 4.0,
            },
            8,
        );
        assert!(matches!(res, Err(CoreError::BandTooNarrow { .. })));
        // Wide enough band sets rho0 = f_max/c_max.
        let plan = choose_probe_frequencies(
            &g,
            FrequencyChoice::Band {
                f_min: 0.3,
                f_max: 1.5,
                c_min: 1.0,
                c_max: 1.2,
            },
            8,
        )
        .unwrap();
        assert!((plan.rho0 - 1.25).abs() < 1e-12);
    }

    #[test]
    fn two_antipodal_frequencies_give_a_cosine() {
        let g = grid(32, 32);
        let plan = choose_probe_frequencies(&g, FrequencyChoice::Explicit { rho0: 1.0 }, 2).unwrap();
        let probe = build_sinusoid_probe(&plan, &g);
        let (fx, fz) = plan.freqs[0];
        for iz in 0..g.nz {
            for ix in 0..g.nx {
                let (x, z) = g.coords(ix, iz);
                let want = 2.0 * (fx * x + fz * z).cos();
                assert!((probe.at(ix, iz) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probe_spectrum_is_exactly_the_plan_spikes_with_equal_magnitude() {
        let g = grid(64, 64);
        let plan = default_plan(&g);
        let probe = build_sinusoid_probe(&plan, &g);
        let hat = forward_transform(&probe);
        let expected = g.n() as f64 * g.cell_area() / TAU.powi(2);
        let mut spikes = 0;
        for jz in 0..g.nz {
            for jx in 0..g.nx {
                let v = hat.at(jx, jz).norm();
                if plan.freq_indices.contains(&(jx, jz)) {
                    spikes += 1;
                    assert!((v - expected).abs() < 1e-9 * expected, "spike at ({jx},{jz})");
                } else {
                    assert!(v < 1e-9 * expected, "leakage at ({jx},{jz}): {v}");
                }
            }
        }
        assert_eq!(spikes, 8);
    }

    #[test]
    fn identity_operator_gives_unit_columns() {
        let g = grid(64, 64);
        let plan = default_plan(&g);
        let id = FnOperator::new(g, |v| v.clone());
        let cols = pdo_probe(&id, &plan).unwrap();
        for k in 0..plan.n_angles() {
            for i in 0..g.n() {
                let c = cols.cols[(i, k)];
                assert!(
                    (c - Complex64::new(1.0, 0.0)).norm() < 1e-8,
                    "column {k} at {i}: {c}"
                );
            }
        }
    }

    #[test]
    fn smooth_spatial_multiplier_recovered_in_columns() {
        let g = grid(64, 64);
        let plan = default_plan(&g);
        let a = Field::from_fn(g, |x, z| {
            1.0 + 0.3 * (TAU * x / g.x_max()).cos() + 0.2 * (TAU * z / g.z_max()).sin()
        });
        let a2 = a.clone();
        let op = FnOperator::new(g, move |v| v.hadamard(&a2));
        let cols = pdo_probe(&op, &plan).unwrap();
        for k in 0..plan.n_angles() {
            for i in 0..g.n() {
                let got = cols.cols[(i, k)].re;
                let want = a.values[i];
                assert!(
                    (got - want).abs() < 0.01 * want.abs(),
                    "column {k} at {i}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn weights_interpolate_exactly_at_samples() {
        let g = grid(64, 64);
        let plan = default_plan(&g);
        for j in 0..plan.n_angles() {
            for k in 0..plan.n_angles() {
                let w = eval_pdo_weight(&plan, k, plan.freqs[j]);
                let want = if j == k { 1.0 } else { 0.0 };
                assert!((w - want).abs() < 1e-12, "w_{k}(xi_{j}) = {w}");
            }
        }
        // Linear radial extension: at 2*xi_k the weight doubles.
        for k in 0..plan.n_angles() {
            let (fx, fz) = plan.freqs[k];
            let w = eval_pdo_weight(&plan, k, (2.0 * fx, 2.0 * fz));
            assert!((w - 2.0).abs() < 1e-12);
        }
        // Zero at the origin.
        let grid_w = build_pdo_weights(&plan, &g);
        for w in &grid_w {
            assert_eq!(w[g.idx(0, 0)], Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn angular_interpolation_reproduces_cos_2theta_exactly() {
        let g = grid(64, 64);
        let plan = default_plan(&g);
        let f = |theta: f64| (2.0 * theta).cos();
        // Evaluate each weight at its own sample radius so the radial factor
        // is one and only the angular interpolant is exercised.
        for m in 0..64 {
            let theta = TAU * m as f64 / 64.0;
            let mut got = 0.0;
            for k in 0..plan.n_angles() {
                let rho_k = plan.radius(k);
                got += f(plan.angle(k))
                    * eval_pdo_weight(&plan, k, (rho_k * theta.cos(), rho_k * theta.sin()));
            }
            assert!((got - f(theta)).abs() < 1e-10, "theta {theta}: {got}");
        }
    }

    #[test]
    fn flat_symbol_assembles_to_radially_scaled_identity() {
        let g = grid(64, 64);
        let plan = default_plan(&g);
        let id = FnOperator::new(g, |v| v.clone());
        let cols = pdo_probe(&id, &plan).unwrap();
        let weights = build_pdo_weights(&plan, &g);
        let (sym, residual) = assemble_pdo_operator(&cols, &weights, &g).unwrap();
        assert!(residual < 1e-6);

        // On the sample ring the assembled symbol is exactly one: probe with
        // a plane wave at a sample frequency.
        let (fx, fz) = plan.freqs[1];
        let v = Field::from_fn(g, |x, z| (fx * x + fz * z).cos());
        let out = sym.apply(&v).unwrap();
        let err = out.sub(&v).norm() / v.norm();
        assert!(err < 1e-6, "on-ring apply error {err}");

        // Symmetrized assembly passes the adjoint identity.
        let u = Field::from_fn(g, |x, z| (0.3 * x).sin() + (0.2 * z).cos());
        let w = Field::from_fn(g, |x, z| (0.25 * x + 0.1 * z).cos());
        let su = sym.apply_symmetric(&u).unwrap();
        let sw = sym.apply_symmetric(&w).unwrap();
        let lhs = su.dot(&w);
        let rhs = u.dot(&sw);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(rhs.abs()).max(1e-30));
    }
}
