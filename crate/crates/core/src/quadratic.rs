//! Ideal quadratic benchmark problem: an explicitly constructed misfit
//! Hessian H_d = A A^T + V Lambda V^T, where A is an order-1/2 operator with
//! a rank-3 separated symbol that diminishes with depth, and V holds
//! plane-wave modes concentrated near the surface. The windowed quadratic
//! misfit has a known global minimum and, combined with the biharmonic
//! prior, an exactly Gaussian posterior that small grids can materialize.

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};
use crate::fft::{forward_transform, inverse_transform};
use crate::grid::{freq_coords, Field, Grid2D};
use crate::prior::BiharmonicPrior;
use crate::psido::{LinearOperator, LowRankSymbol, DENSE_LIMIT};

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Objective/gradient contract shared by the optimizer and the samplers.
pub trait ObjectiveProblem: Sync {
    fn grid(&self) -> Grid2D;
    /// Full negative log-posterior (up to a constant).
    fn objective(&self, m: &Field) -> f64;
    /// Gradient in the area-weighted inner product.
    fn gradient(&self, m: &Field) -> Field;
    /// Data-misfit potential alone; the pCN acceptance uses this.
    fn misfit(&self, m: &Field) -> f64;
    fn prior(&self) -> &BiharmonicPrior;
}

#[derive(Debug, Clone)]
pub struct QuadraticConfig {
    pub grid: Grid2D,
    pub delta: f64,
    pub gamma: f64,
    pub n_modes: usize,
    /// Depth decay rate of the plane-wave modes, in units of 1/z_max.
    pub mode_decay: f64,
    /// Mode weights run log-spaced from weight_max down to weight_min.
    pub weight_max: f64,
    pub weight_min: f64,
    /// Seed for the synthetic target model.
    pub target_seed: u64,
    /// Replaces the synthetic target when provided.
    pub target: Option<Field>,
}

impl QuadraticConfig {
    pub fn default_for(grid: Grid2D) -> Self {
        Self {
            grid,
            delta: 0.09,
            gamma: 0.88,
            n_modes: 10,
            mode_decay: 3.0,
            weight_max: 100.0,
            weight_min: 1.0,
            target_seed: 1,
            target: None,
        }
    }
}

/// The assembled benchmark problem.
pub struct QuadraticProblem {
    pub grid: Grid2D,
    /// Rank-3 symbol of the order-1/2 factor A.
    pub a_symbol: LowRankSymbol,
    /// Orthonormal near-surface modes (area-weighted inner product).
    pub modes: Vec<Field>,
    pub mode_weights: Vec<f64>,
    /// Diagonal window W of the objective, zero on the boundary ring.
    pub window: Field,
    pub prior: BiharmonicPrior,
    pub m_star: Field,
    /// b = H_d m*.
    pub b: Field,
    /// Half-power envelope band edge used by the symbol.
    pub rho_band: f64,
}

/// P_{1/2}(rho): behaves as sqrt(rho) in band and decays to zero for large
/// |xi|, modeling the loss of out-of-band frequency content.
pub fn half_power_envelope(rho: f64, rho_band: f64) -> f64 {
    rho.sqrt() * (-(rho / rho_band).powi(4)).exp()
}

/// Separable Tukey window: raised-cosine tapers over a margin fraction of
/// each side. `top_margin` applies at z = 0 (the surface).
pub fn tukey_window(grid: Grid2D, side_margin: f64, top_margin: f64) -> Field {
    let taper = |t: f64, lo_m: f64, hi_m: f64| -> f64 {
        // t in [0, 1); distance to each edge in fractional units.
        let lo = if lo_m > 0.0 && t < lo_m {
            0.5 * (1.0 - (std::f64::consts::PI * t / lo_m).cos())
        } else {
            1.0
        };
        let hi = if hi_m > 0.0 && t > 1.0 - hi_m {
            0.5 * (1.0 - (std::f64::consts::PI * (1.0 - t) / hi_m).cos())
        } else {
            1.0
        };
        lo * hi
    };
    Field::from_fn(grid, |x, z| {
        let tx = x / grid.x_max();
        let tz = z / grid.z_max();
        taper(tx, side_margin, side_margin) * taper(tz, top_margin, side_margin)
    })
}

/// Builds the rank-3 separated symbol of the paper's toy factor A:
/// s_A(x, xi) = w(x) P_{1/2}(|xi|) (0.1 + cos^2(arg xi + pi x / x_max))
///              / (0.1 + (z/z_max)^2),
/// split by the compound-angle identity
/// 0.1 + cos^2(t + p) = 0.6 + (cos 2t cos 2p)/2 - (sin 2t sin 2p)/2.
pub fn build_toy_symbol(grid: &Grid2D, window: &Field, rho_band: f64) -> LowRankSymbol {
    let depth_profile = |z: f64| 0.1 + (z / grid.z_max()).powi(2);
    let x_phase = |x: f64| TAU * x / grid.x_max(); // 2 * (pi x / x_max)

    let mut a1 = Field::zeros(*grid);
    let mut a2 = Field::zeros(*grid);
    let mut a3 = Field::zeros(*grid);
    for iz in 0..grid.nz {
        for ix in 0..grid.nx {
            let (x, z) = grid.coords(ix, iz);
            let base = window.at(ix, iz) / depth_profile(z);
            let i = grid.idx(ix, iz);
            a1.values[i] = base;
            a2.values[i] = base * x_phase(x).cos();
            a3.values[i] = base * x_phase(x).sin();
        }
    }

    let fg = freq_coords(grid);
    let n = grid.n();
    let mut b1 = vec![num_complex::Complex64::new(0.0, 0.0); n];
    let mut b2 = b1.clone();
    let mut b3 = b1.clone();
    for jz in 0..grid.nz {
        for jx in 0..grid.nx {
            let rho = fg.magnitude(jx, jz);
            let theta = fg.angle(jx, jz);
            let p = half_power_envelope(rho, rho_band);
            let i = grid.idx(jx, jz);
            b1[i] = num_complex::Complex64::new(0.6 * p, 0.0);
            b2[i] = num_complex::Complex64::new(0.5 * (2.0 * theta).cos() * p, 0.0);
            b3[i] = num_complex::Complex64::new(-0.5 * (2.0 * theta).sin() * p, 0.0);
        }
    }
    LowRankSymbol::new(*grid, vec![a1, a2, a3], vec![b1, b2, b3])
        .expect("factors share the grid by construction")
}

/// Closed-form toy symbol, for oracle comparison against the separated form.
pub fn toy_symbol_closed_form(
    grid: &Grid2D,
    window: &Field,
    rho_band: f64,
    ix: usize,
    iz: usize,
    jx: usize,
    jz: usize,
) -> f64 {
    let fg = freq_coords(grid);
    let (x, z) = grid.coords(ix, iz);
    let rho = fg.magnitude(jx, jz);
    let theta = fg.angle(jx, jz);
    let w = window.at(ix, iz);
    w * half_power_envelope(rho, rho_band) * (0.1
        + (theta + std::f64::consts::PI * x / grid.x_max()).cos().powi(2))
        / (0.1 + (z / grid.z_max()).powi(2))
}

impl QuadraticProblem {
    pub fn build(cfg: &QuadraticConfig) -> Result<Self> {
        let grid = cfg.grid;
        let window = tukey_window(grid, 0.10, 0.15);
        let nyq = std::f64::consts::PI / grid.dx.max(grid.dz);
        let rho_band = 0.7 * nyq;
        let a_symbol = build_toy_symbol(&grid, &window, rho_band);

        // Near-surface plane-wave modes: sin/cos pairs of the lowest x
        // harmonics with rapid depth decay. Band-limiting below the default
        // high-pass dead zone is the last construction step, so the modes
        // carry exactly the low-frequency content the filtered probing
        // cannot see and the low-rank correction must restore. On coarse
        // grids the band widens until it holds n_modes independent fields.
        let fg = freq_coords(&grid);
        let (dxx, dxz) = fg.cell();
        let min_band = (2.5 * cfg.n_modes as f64 * dxx * dxz / std::f64::consts::PI).sqrt();
        let mode_band = (0.24 * rho_band).max(min_band);
        let mut modes: Vec<Field> = Vec::with_capacity(cfg.n_modes);
        for m in 0..cfg.n_modes {
            let harmonic = (m / 2 + 1) as f64;
            // Staggered decay rates keep the modes independent after
            // band-limiting, where a shared depth profile would collapse them.
            let decay = cfg.mode_decay
                * (0.6 + 0.9 * m as f64 / (cfg.n_modes.max(2) - 1) as f64);
            let raw = Field::from_fn(grid, |x, z| {
                let phase = harmonic * std::f64::consts::PI * x / grid.x_max();
                let wave = if m % 2 == 0 { phase.cos() } else { phase.sin() };
                wave * (-decay * z / grid.z_max()).exp()
            });
            let mut v = lowpass(&raw.hadamard(&window), 0.6 * mode_band, 0.95 * mode_band);
            for prev in &modes {
                let c = v.dot(prev);
                v.axpy(-c, prev);
            }
            let norm = v.norm();
            if norm < 1e-10 {
                return Err(CoreError::InvalidGrid(format!(
                    "mode {m} is linearly dependent after orthogonalization"
                )));
            }
            modes.push(v.scale(1.0 / norm));
        }
        let n_modes = modes.len();
        let mode_weights: Vec<f64> = (0..n_modes)
            .map(|i| {
                if n_modes == 1 {
                    cfg.weight_max
                } else {
                    let t = i as f64 / (n_modes - 1) as f64;
                    cfg.weight_max * (cfg.weight_min / cfg.weight_max).powf(t)
                }
            })
            .collect();

        let prior = BiharmonicPrior::new(grid, cfg.delta, cfg.gamma, None)?;

        let m_star = match &cfg.target {
            Some(t) => {
                grid.check_match(&t.grid)?;
                t.clone()
            }
            None => synthetic_target(grid, rho_band, cfg.target_seed),
        };

        let mut qp = Self {
            grid,
            a_symbol,
            modes,
            mode_weights,
            window,
            prior,
            m_star: m_star.clone(),
            b: Field::zeros(grid),
            rho_band,
        };
        qp.b = qp.apply_misfit_hessian(&m_star)?;
        Ok(qp)
    }

    /// H_d m = A A^T m + sum_k w_k <v_k, m> v_k.
    pub fn apply_misfit_hessian(&self, m: &Field) -> Result<Field> {
        self.grid.check_match(&m.grid)?;
        let mut out = self.a_symbol.apply(&self.a_symbol.apply_adjoint(m)?)?;
        for (v, w) in self.modes.iter().zip(&self.mode_weights) {
            out.axpy(w * v.dot(m), v);
        }
        Ok(out)
    }

    /// The misfit part of the objective: Phi_d(u) = u.H_d.u/2 - b.u + b.m*/2.
    pub fn misfit_of_windowed(&self, u: &Field) -> Result<f64> {
        let hu = self.apply_misfit_hessian(u)?;
        Ok(0.5 * u.dot(&hu) - self.b.dot(u) + 0.5 * self.b.dot(&self.m_star))
    }

    /// Raw misfit Hessian H_d as an operator.
    pub fn misfit_hessian_op(&self) -> impl LinearOperator + '_ {
        crate::psido::FnOperator::new(self.grid, move |v| {
            self.apply_misfit_hessian(v).expect("grid checked")
        })
    }

    /// Effective misfit Hessian of the objective, W H_d W.
    pub fn windowed_misfit_op(&self) -> impl LinearOperator + '_ {
        crate::psido::FnOperator::new(self.grid, move |v| {
            let wv = v.hadamard(&self.window);
            self.apply_misfit_hessian(&wv)
                .expect("grid checked")
                .hadamard(&self.window)
        })
    }

    /// Full Hessian of the objective, W H_d W + R.
    pub fn full_hessian_op(&self) -> impl LinearOperator + '_ {
        crate::psido::FnOperator::new(self.grid, move |v| {
            let wv = v.hadamard(&self.window);
            let misfit = self
                .apply_misfit_hessian(&wv)
                .expect("grid checked")
                .hadamard(&self.window);
            misfit.add(&self.prior.apply_precision(v).expect("grid checked"))
        })
    }

    /// Exactly Gaussian posterior on small grids: mean and value-space
    /// covariance (the matrix a sample covariance of value vectors estimates).
    pub fn exact_posterior(&self) -> Result<ExactPosterior> {
        let n = self.grid.n();
        if n > DENSE_LIMIT {
            return Err(CoreError::TooLarge {
                n,
                limit: DENSE_LIMIT,
            });
        }
        let op = self.full_hessian_op();
        let mut p = DMatrix::zeros(n, n);
        let mut e = Field::zeros(self.grid);
        for j in 0..n {
            e.values[j] = 1.0;
            let col = op.apply(&e);
            for i in 0..n {
                p[(i, j)] = col.values[i];
            }
            e.values[j] = 0.0;
        }
        let wb = self.b.hadamard(&self.window);
        let chol = p
            .clone()
            .cholesky()
            .ok_or_else(|| CoreError::Format("posterior precision not SPD".into()))?;
        let mean_vec = chol.solve(&nalgebra::DVector::from_vec(wb.values.clone()));
        let covariance = chol.inverse() / self.grid.cell_area();
        let mean = Field {
            grid: self.grid,
            values: mean_vec.iter().copied().collect(),
        };
        Ok(ExactPosterior { mean, covariance })
    }
}

/// Dense ground-truth posterior for small grids.
pub struct ExactPosterior {
    pub mean: Field,
    /// Value-space covariance: (h * (W H_d W + R))^-1 with h the cell area.
    pub covariance: DMatrix<f64>,
}

impl ExactPosterior {
    pub fn std_field(&self, grid: Grid2D) -> Field {
        Field {
            grid,
            values: (0..grid.n())
                .map(|i| self.covariance[(i, i)].max(0.0).sqrt())
                .collect(),
        }
    }
}

/// Raised-cosine low-pass: 1 below `full`, 0 above `edge`.
fn lowpass(f: &Field, full: f64, edge: f64) -> Field {
    let grid = f.grid;
    let fg = freq_coords(&grid);
    let mut mult = vec![0.0; grid.n()];
    for jz in 0..grid.nz {
        for jx in 0..grid.nx {
            let rho = fg.magnitude(jx, jz);
            mult[grid.idx(jx, jz)] = if rho <= full {
                1.0
            } else if rho >= edge {
                0.0
            } else {
                0.5 * (1.0 + (std::f64::consts::PI * (rho - full) / (edge - full)).cos())
            };
        }
    }
    crate::fft::apply_real_even_multiplier(f, &mult)
}

/// Band-passed random field standing in for the normalized reflectivity
/// target; deterministic in the seed.
fn synthetic_target(grid: Grid2D, rho_band: f64, seed: u64) -> Field {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Field {
        grid,
        values: (0..grid.n())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect(),
    };
    let fg = freq_coords(&grid);
    let mut hat = forward_transform(&noise);
    for jz in 0..grid.nz {
        for jx in 0..grid.nx {
            let rho = fg.magnitude(jx, jz);
            // Kill DC, keep the operator's information band.
            hat.values[grid.idx(jx, jz)] *= rho * (-(rho / rho_band).powi(4)).exp();
        }
    }
    let f = inverse_transform(&hat).expect("real multiplier");
    let peak = f.max_abs();
    f.scale(if peak > 0.0 { 1.0 / peak } else { 1.0 })
}

impl ObjectiveProblem for QuadraticProblem {
    fn grid(&self) -> Grid2D {
        self.grid
    }

    fn objective(&self, m: &Field) -> f64 {
        let wm = m.hadamard(&self.window);
        let misfit = self.misfit_of_windowed(&wm).expect("grid checked");
        let rm = self.prior.apply_precision(m).expect("grid checked");
        misfit + 0.5 * m.dot(&rm)
    }

    fn gradient(&self, m: &Field) -> Field {
        let wm = m.hadamard(&self.window);
        let hwm = self.apply_misfit_hessian(&wm).expect("grid checked");
        let inner = hwm.sub(&self.b).hadamard(&self.window);
        inner.add(&self.prior.apply_precision(m).expect("grid checked"))
    }

    fn misfit(&self, m: &Field) -> f64 {
        let wm = m.hadamard(&self.window);
        self.misfit_of_windowed(&wm).expect("grid checked")
    }

    fn prior(&self) -> &BiharmonicPrior {
        &self.prior
    }
}
