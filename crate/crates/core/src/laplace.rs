//! SPD factored Laplace approximation of the posterior precision.
//!
//! The precision is H~ = M (I + U diag(d) U^T) M^T, where M is a PsiDO whose
//! symbol combines the square-root misfit symbol with the prior's square
//! root in quadrature, and (U, d) is a low-rank eigendecomposition of the
//! whitened residual inv_M H inv_M^T - I against the true Hessian. Because
//! inv_M only approximates M^-1, the precision that defines acceptance is
//! the exact inverse of the sampling covariance; `quad_form` evaluates that
//! inverse directly, which is what keeps the gpCN proposal and acceptance
//! rule mutually consistent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::cg;
use crate::error::Result;
use crate::grid::{Field, Grid2D};
use crate::lowrank::{randomized_symmetric_eig, EigSort};
use crate::prior::{white_noise, BiharmonicPrior};
use crate::probing::PsfProbePlan;
use crate::psido::{FnOperator, LinearOperator, LowRankSymbol};

/// Forward/inverse square-root factor pair. `inv_factor` applies the
/// pointwise-reciprocal symbol and is only an approximate inverse; the
/// correction absorbs the residual.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    pub factor: LowRankSymbol,
    pub inv_factor: LowRankSymbol,
}

impl SpdFactor {
    /// Pure Fourier-multiplier factor (exactly invertible); used by tests
    /// and by the prior-only limit.
    pub fn from_multiplier(grid: Grid2D, m: Vec<f64>) -> Result<Self> {
        let fwd: Vec<num_complex::Complex64> =
            m.iter().map(|&v| num_complex::Complex64::new(v, 0.0)).collect();
        let inv: Vec<num_complex::Complex64> = m
            .iter()
            .map(|&v| num_complex::Complex64::new(1.0 / v, 0.0))
            .collect();
        Ok(Self {
            factor: LowRankSymbol::multiplier(grid, fwd)?,
            inv_factor: LowRankSymbol::multiplier(grid, inv)?,
        })
    }
}

/// Separates offset rows g_k(xi) (the deviation of a positive symbol from
/// its base term) by the small-Gram eigendecomposition. Returns spatial
/// coefficients (weights x left vectors x sigma) and real frequency basis
/// rows, keeping factors above the relative sigma threshold. The large-side
/// SVD is avoided on purpose; it is not reliable for exactly rank-deficient
/// row sets.
fn separate_offset_rows(
    grid: &Grid2D,
    weights: &[Field],
    rows: &nalgebra::DMatrix<f64>,
    rel_threshold: f64,
) -> (Vec<Field>, Vec<Vec<f64>>) {
    let (r_rows, n) = rows.shape();
    let gram = rows * rows.transpose();
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..r_rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    if l1 == 0.0 {
        return (Vec::new(), Vec::new());
    }
    let lambda_floor = l1 * (rel_threshold * rel_threshold).max(1e-14);
    let kept: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| eig.eigenvalues[i] > lambda_floor)
        .collect();

    let mut spatial = Vec::with_capacity(kept.len());
    let mut freq = Vec::with_capacity(kept.len());
    for &l in &kept {
        let sigma = eig.eigenvalues[l].max(0.0).sqrt();
        let mut a = Field::zeros(*grid);
        for k in 0..r_rows {
            let c = eig.eigenvectors[(k, l)] * sigma;
            for i in 0..grid.n() {
                a.values[i] += weights[k].values[i] * c;
            }
        }
        spatial.push(a);
        let mut b = vec![0.0; n];
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..r_rows {
                acc += eig.eigenvectors[(k, l)] * rows[(k, j)];
            }
            b[j] = acc / sigma;
        }
        freq.push(b);
    }
    (spatial, freq)
}

/// Assembles base(xi) * (1 + sum_k a_k(x) g_k(xi)) as a low-rank symbol.
fn offset_symbol(
    grid: &Grid2D,
    base: &[f64],
    spatial: Vec<Field>,
    freq: Vec<Vec<f64>>,
) -> Result<LowRankSymbol> {
    let n = grid.n();
    let mut factors_a = vec![Field::constant(*grid, 1.0)];
    let mut factors_b: Vec<Vec<num_complex::Complex64>> = vec![base
        .iter()
        .map(|&v| num_complex::Complex64::new(v, 0.0))
        .collect()];
    for (a, b) in spatial.into_iter().zip(freq) {
        factors_a.push(a);
        factors_b.push(
            (0..n)
                .map(|j| num_complex::Complex64::new(b[j] * base[j], 0.0))
                .collect(),
        );
    }
    LowRankSymbol::new(*grid, factors_a, factors_b)
}

/// Builds the factored square root M and its approximate inverse from a
/// square-root misfit symbol: the misfit rows are sampled at the probing
/// lattice, combined with the prior multiplier in quadrature,
/// s_M = sqrt(s_misfit^2 + (delta + gamma |xi|^2)^2), and re-separated with
/// a smooth partition of unity over the same sample points.
pub fn build_spd_factor(
    sqrt_misfit: &LowRankSymbol,
    prior: &BiharmonicPrior,
    plan: &PsfProbePlan,
) -> Result<SpdFactor> {
    let grid = sqrt_misfit.grid();
    // The factor wants smoothness over resolution: sample the symbol on a
    // coarse sub-lattice of the probing points (the apply cost downstream is
    // linear in this rank, and the low-rank correction absorbs the loss).
    let coarse = PsfProbePlan::regular(
        &grid,
        plan.nodes_x.len().min(3),
        plan.nodes_z.len().min(3),
        1,
    )?;
    let weights = factor_weights(&coarse, &grid);
    let rows = sqrt_misfit.eval_rows(&coarse.points)?;
    let plan = &coarse;
    let n = grid.n();
    let fg = crate::grid::freq_coords(&grid);
    let mut prior_half = vec![0.0; n];
    for jz in 0..grid.nz {
        for jx in 0..grid.nx {
            let m = fg.magnitude(jx, jz);
            prior_half[grid.idx(jx, jz)] = prior.delta + prior.gamma * m * m;
        }
    }
    // Separate the x-dependent deviation of the RATIO to the prior
    // multiplier from one: g = sqrt(1 + (s/pi)^2) - 1 vanishes wherever the
    // misfit symbol does (the whole filtered-away band), so truncating its
    // separated form cannot disturb the exact prior behavior there, and the
    // O(1) scale keeps truncation away from the wide dynamic range the
    // prior part spans.
    let r_rows = plan.points.len();
    let mut g_fwd = nalgebra::DMatrix::zeros(r_rows, n);
    let mut g_inv = nalgebra::DMatrix::zeros(r_rows, n);
    for k in 0..r_rows {
        for j in 0..n {
            let s = rows[(k, j)].re.max(0.0) / prior_half[j];
            let ratio = (1.0 + s * s).sqrt();
            g_fwd[(k, j)] = ratio - 1.0;
            g_inv[(k, j)] = 1.0 / ratio - 1.0;
        }
    }
    let (a_fwd, b_fwd) = separate_offset_rows(&grid, &weights, &g_fwd, 1e-2);
    let (a_inv, b_inv) = separate_offset_rows(&grid, &weights, &g_inv, 1e-2);
    let factor = offset_symbol(&grid, &prior_half, a_fwd, b_fwd)?;
    let prior_half_inv: Vec<f64> = prior_half.iter().map(|v| 1.0 / v).collect();
    let inv_factor = offset_symbol(&grid, &prior_half_inv, a_inv, b_inv)?;
    Ok(SpdFactor { factor, inv_factor })
}

/// Low-rank correction (U, d): leading eigenpairs by magnitude of the
/// whitened residual G = inv_M H inv_M^T - I, with d clipped above -1.
/// The corrected precision M (I + U d U^T) M^T then matches H up to the
/// truncated tail of G.
pub fn build_correction(
    h_full: &dyn LinearOperator,
    factor: &SpdFactor,
    k: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<(Vec<Field>, Vec<f64>)> {
    let grid = h_full.grid();
    let residual = |w: &Field| -> Field {
        let a = factor.inv_factor.apply_adjoint(w).expect("grid fixed");
        let b = h_full.apply(&a);
        let c = factor.inv_factor.apply(&b).expect("grid fixed");
        c.sub(w)
    };
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (values, vectors) = randomized_symmetric_eig(
        grid,
        &residual,
        k,
        oversample,
        power_iters,
        &mut rng,
        EigSort::ByMagnitude,
    );
    let d: Vec<f64> = values.iter().map(|&v| v.max(-1.0 + 1e-6)).collect();
    Ok((vectors, d))
}

/// MAP point plus factored SPD precision with sampling and quadratic-form
/// capability; immutable once built.
pub struct LaplaceApproximation {
    pub m_map: Field,
    pub factor: SpdFactor,
    pub correction_u: Vec<Field>,
    pub correction_d: Vec<f64>,
    cg_tol: f64,
    cg_max_iters: usize,
}

impl LaplaceApproximation {
    pub fn new(
        m_map: Field,
        factor: SpdFactor,
        correction_u: Vec<Field>,
        correction_d: Vec<f64>,
    ) -> Self {
        assert_eq!(correction_u.len(), correction_d.len());
        assert!(correction_d.iter().all(|&d| d > -1.0));
        Self {
            m_map,
            factor,
            correction_u,
            correction_d,
            cg_tol: 1e-10,
            cg_max_iters: cg::DEFAULT_MAX_ITERS,
        }
    }

    pub fn grid(&self) -> Grid2D {
        self.m_map.grid
    }

    /// I + U f(d) U^T applied to a field, with plain Euclidean projections
    /// (U is plain-orthonormal).
    fn apply_low_rank(&self, v: &Field, f: impl Fn(f64) -> f64) -> Field {
        let mut out = v.clone();
        for (u, &d) in self.correction_u.iter().zip(&self.correction_d) {
            let c: f64 = u
                .values
                .iter()
                .zip(&v.values)
                .map(|(a, b)| a * b)
                .sum();
            out.axpy(f(d) * c, u);
        }
        out
    }

    /// Deterministic sampling map: white noise w with cov I/h maps to a
    /// fluctuation with covariance equal to the inverse of the definitional
    /// precision. zeta = inv_M^T (I + U ((1+d)^(-1/2) - 1) U^T) w.
    pub fn sample_from_noise(&self, w: &Field) -> Result<Field> {
        let inner = self.apply_low_rank(w, |d| 1.0 / (1.0 + d).sqrt() - 1.0);
        self.factor.inv_factor.apply_adjoint(&inner)
    }

    /// Zero-mean fluctuation draw.
    pub fn sample_fluctuation(&self, rng: &mut impl Rng) -> Field {
        let w = white_noise(self.grid(), rng);
        self.sample_from_noise(&w).expect("noise lives on the grid")
    }

    /// Full posterior-surrogate draw m_map + zeta.
    pub fn sample(&self, rng: &mut impl Rng) -> Field {
        self.m_map.add(&self.sample_fluctuation(rng))
    }

    /// Covariance map of the sampler: C = inv_M^T (I + U d U^T)^-1 inv_M
    /// (times 1/h under sampling). Exposed for oracle tests.
    pub fn covariance_apply(&self, v: &Field) -> Result<Field> {
        let a = self.factor.inv_factor.apply(v)?;
        let b = self.apply_low_rank(&a, |d| 1.0 / (1.0 + d) - 1.0);
        self.factor.inv_factor.apply_adjoint(&b)
    }

    /// Precision apply of the corrected approximation, M (I + U d U^T) M^T.
    /// This approximates the true Hessian; the sampler inverts it only up to
    /// the accuracy of inv_M, which is why `quad_form` solves against the
    /// covariance map instead.
    pub fn precision_apply(&self, v: &Field) -> Result<Field> {
        let a = self.factor.factor.apply_adjoint(v)?;
        let b = self.apply_low_rank(&a, |d| d);
        self.factor.factor.apply(&b)
    }

    /// One half of the squared norm of v under the exact precision of the
    /// sampling distribution: (v . C^-1 v) / 2, by preconditioned CG against
    /// the covariance map.
    pub fn quad_form(&self, v: &Field) -> Result<f64> {
        if v.max_abs() == 0.0 {
            return Ok(0.0);
        }
        let grid = self.grid();
        let cov = FnOperator::new(grid, |w| self.covariance_apply(w).expect("grid fixed"));
        let prec = FnOperator::new(grid, |w| self.precision_apply(w).expect("grid fixed"));
        let y = cg::solve_preconditioned(&cov, v, Some(&prec), self.cg_tol, self.cg_max_iters)?;
        Ok(0.5 * v.dot(&y))
    }
}



/// A Gaussian proposal reference for gpCN: a center, a fluctuation sampler,
/// and the quadratic form of the exact precision of that sampler. The two
/// capabilities must describe the same measure; the samplers rely on it.
pub trait GaussianReference: Sync {
    fn center(&self) -> &Field;
    fn draw_fluctuation(&self, rng: &mut ChaCha8Rng) -> Field;
    fn quad_form_centered(&self, v: &Field) -> Result<f64>;
}

impl GaussianReference for LaplaceApproximation {
    fn center(&self) -> &Field {
        &self.m_map
    }
    fn draw_fluctuation(&self, rng: &mut ChaCha8Rng) -> Field {
        self.sample_fluctuation(rng)
    }
    fn quad_form_centered(&self, v: &Field) -> Result<f64> {
        self.quad_form(v)
    }
}
