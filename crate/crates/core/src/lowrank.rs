//! Randomized solver for the prior-preconditioned generalized eigenvalue
//! problem H_d v = lambda R v, and the resulting low-rank posterior formulas:
//! Woodbury inverse apply and exact-covariance sampling.
//!
//! The pencil is whitened through the prior's exact half powers:
//! R^{-1/2} H_d R^{-1/2} is symmetric, its eigenvalues are the generalized
//! ones, and u -> R^{-1/2} u maps orthonormal vectors to R-orthonormal ones.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::{Field, Grid2D};
use crate::prior::{white_noise, BiharmonicPrior};
use crate::psido::LinearOperator;

/// Ordering rule for the retained eigenpairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigSort {
    /// Largest algebraic value first (positive semidefinite pencils).
    Descending,
    /// Largest magnitude first (signed residual corrections).
    ByMagnitude,
}

/// Two-pass randomized eigendecomposition of a symmetric matrix-free
/// operator: Gaussian range finder with power iterations, then Rayleigh-Ritz
/// on the captured subspace. Returns `k` (value, vector) pairs with plain
/// Euclidean-orthonormal vectors.
pub fn randomized_symmetric_eig(
    grid: Grid2D,
    apply: &dyn Fn(&Field) -> Field,
    k: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut ChaCha8Rng,
    sort: EigSort,
) -> (Vec<f64>, Vec<Field>) {
    let n = grid.n();
    let l = (k + oversample).min(n);
    let mut y = DMatrix::zeros(n, l);
    for j in 0..l {
        let w = Field {
            grid,
            values: (0..n)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect(),
        };
        let col = apply(&w);
        for i in 0..n {
            y[(i, j)] = col.values[i];
        }
    }
    for _ in 0..power_iters {
        let q = thin_q(y);
        y = apply_columns(grid, apply, &q);
    }
    let q = thin_q(y);
    let aq = apply_columns(grid, apply, &q);
    let mut small = q.transpose() * &aq;
    small = (small.clone() + small.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(small);

    let mut order: Vec<usize> = (0..l).collect();
    match sort {
        EigSort::Descending => {
            order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap())
        }
        EigSort::ByMagnitude => order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .abs()
                .partial_cmp(&eig.eigenvalues[a].abs())
                .unwrap()
        }),
    }

    let kept = k.min(l);
    let mut values = Vec::with_capacity(kept);
    let mut vectors = Vec::with_capacity(kept);
    for &idx in order.iter().take(kept) {
        values.push(eig.eigenvalues[idx]);
        let full = &q * eig.eigenvectors.column(idx);
        vectors.push(Field {
            grid,
            values: full.iter().copied().collect(),
        });
    }
    (values, vectors)
}

fn thin_q(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    qr.q()
}

fn apply_columns(
    grid: Grid2D,
    apply: &dyn Fn(&Field) -> Field,
    m: &DMatrix<f64>,
) -> DMatrix<f64> {
    let (n, l) = m.shape();
    let mut out = DMatrix::zeros(n, l);
    let mut f = Field::zeros(grid);
    for j in 0..l {
        f.values.copy_from_slice(m.column(j).as_slice());
        let col = apply(&f);
        for i in 0..n {
            out[(i, j)] = col.values[i];
        }
    }
    out
}

/// Leading generalized eigenpairs of (H_d, R): eigenvalues descending and
/// clipped at zero, vectors R-orthonormal in the area-weighted pairing.
#[derive(Debug, Clone)]
pub struct GenEigPairs {
    pub eigenvalues: Vec<f64>,
    pub vectors: Vec<Field>,
}

impl GenEigPairs {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn empty() -> Self {
        Self {
            eigenvalues: Vec::new(),
            vectors: Vec::new(),
        }
    }
}

/// Solves H_d v = lambda R v for the leading `r` pairs with a two-pass
/// randomized method on the whitened operator. `r + oversample` probes of
/// H_d are spent per power pass.
pub fn randomized_gen_eig(
    hd: &dyn LinearOperator,
    prior: &BiharmonicPrior,
    r: usize,
    oversample: usize,
    power_iters: usize,
    seed: u64,
) -> Result<GenEigPairs> {
    let grid = hd.grid();
    let whitened = |w: &Field| -> Field {
        let half = prior.apply_power(w, -0.5).expect("grid fixed");
        let hw = hd.apply(&half);
        prior.apply_power(&hw, -0.5).expect("grid fixed")
    };
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (raw_values, raw_vectors) = randomized_symmetric_eig(
        grid,
        &whitened,
        r,
        oversample,
        power_iters,
        &mut rng,
        EigSort::Descending,
    );
    let scale = 1.0 / grid.cell_area().sqrt();
    let mut eigenvalues = Vec::with_capacity(raw_values.len());
    let mut vectors = Vec::with_capacity(raw_values.len());
    for (lambda, u) in raw_values.into_iter().zip(raw_vectors) {
        eigenvalues.push(lambda.max(0.0));
        vectors.push(prior.apply_power(&u, -0.5)?.scale(scale));
    }
    Ok(GenEigPairs {
        eigenvalues,
        vectors,
    })
}

/// (H~_d + R)^-1 v = R^-1 v - V D V^T v with D = diag(lambda/(lambda+1)).
pub fn lowrank_posterior_apply_inverse(
    pairs: &GenEigPairs,
    prior: &BiharmonicPrior,
    v: &Field,
) -> Result<Field> {
    let mut out = prior.apply_power(v, -1.0)?;
    for (lambda, vi) in pairs.eigenvalues.iter().zip(&pairs.vectors) {
        let d = lambda / (lambda + 1.0);
        out.axpy(-d * vi.dot(v), vi);
    }
    Ok(out)
}

/// Quadratic form of the low-rank posterior precision:
/// v.(R + H~_d).v / 2 = (v.Rv + sum_i lambda_i <v_i, Rv>^2) / 2.
pub fn lowrank_quad_form(pairs: &GenEigPairs, prior: &BiharmonicPrior, v: &Field) -> Result<f64> {
    let rv = prior.apply_precision(v)?;
    let mut q = v.dot(&rv);
    for (lambda, vi) in pairs.eigenvalues.iter().zip(&pairs.vectors) {
        let c = vi.dot(&rv);
        q += lambda * c * c;
    }
    Ok(0.5 * q)
}

/// Deterministic sampler map: zeta = (I - V S V^T R) R^{-1/2} w for white
/// noise w, with S = I - (Lambda + I)^{-1/2}. cov(zeta) = (H~_d + R)^{-1}.
pub fn lowrank_sample_from_noise(
    pairs: &GenEigPairs,
    prior: &BiharmonicPrior,
    w: &Field,
) -> Result<Field> {
    let z = prior.apply_power(w, -0.5)?;
    let rz = prior.apply_precision(&z)?;
    let mut out = z;
    for (lambda, vi) in pairs.eigenvalues.iter().zip(&pairs.vectors) {
        let s = 1.0 - 1.0 / (lambda + 1.0).sqrt();
        out.axpy(-s * vi.dot(&rz), vi);
    }
    Ok(out)
}

/// Draws one zero-mean sample with covariance (H~_d + R)^-1.
pub fn lowrank_sample(pairs: &GenEigPairs, prior: &BiharmonicPrior, rng: &mut impl Rng) -> Field {
    let w = white_noise(prior.grid, rng);
    lowrank_sample_from_noise(pairs, prior, &w).expect("noise lives on the prior grid")
}

/// Dense materialization of the low-rank posterior precision
/// R + h R V Lambda V^T R in value space. Oracle use.
pub fn dense_lowrank_precision(
    pairs: &GenEigPairs,
    prior: &BiharmonicPrior,
    dense_r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = dense_r.nrows();
    let h = prior.grid.cell_area();
    let mut m = dense_r.clone();
    for (lambda, vi) in pairs.eigenvalues.iter().zip(&pairs.vectors) {
        let rv = dense_r * DVector::from_vec(vi.values.clone());
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += h * lambda * rv[i] * rv[j];
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psido::{dense_materialize, FnOperator};
    use crate::quadratic::{QuadraticConfig, QuadraticProblem};
    use rand::SeedableRng;

    fn grid(nx: usize, nz: usize) -> Grid2D {
        Grid2D::new(nx, nz, 1.0, 1.0).unwrap()
    }

    #[test]
    fn identity_pencil_gives_unit_eigenvalues() {
        let g = grid(12, 8);
        let prior = BiharmonicPrior::new(g, 0.4, 0.9, None).unwrap();
        let p2 = prior.clone();
        let hd = FnOperator::new(g, move |v| p2.apply_precision(v).unwrap());
        let pairs = randomized_gen_eig(&hd, &prior, 8, 6, 1, 7).unwrap();
        for lambda in &pairs.eigenvalues {
            assert!((lambda - 1.0).abs() < 1e-8, "eigenvalue {lambda}");
        }
        // Scaled pencil: H_d = c R.
        let c = 3.5;
        let p3 = prior.clone();
        let hd = FnOperator::new(g, move |v| p3.apply_precision(v).unwrap().scale(c));
        let pairs = randomized_gen_eig(&hd, &prior, 5, 6, 1, 8).unwrap();
        for lambda in &pairs.eigenvalues {
            assert!((lambda - c).abs() < 1e-8 * c);
        }
    }

    #[test]
    fn r_orthonormal_vectors_and_small_residuals() {
        let g = grid(16, 16);
        let cfg = QuadraticConfig::default_for(g);
        let qp = QuadraticProblem::build(&cfg).unwrap();
        let hd = qp.windowed_misfit_op();
        let pairs = randomized_gen_eig(&hd, &qp.prior, 20, 10, 2, 11).unwrap();

        for i in 0..pairs.rank() {
            let rv = qp.prior.apply_precision(&pairs.vectors[i]).unwrap();
            for j in 0..pairs.rank() {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = pairs.vectors[j].dot(&rv);
                assert!((got - want).abs() < 1e-8, "V^T R V at ({i},{j}): {got}");
            }
        }

        // Residual ||H v - lambda R v||_{R^-1} <= 0.05 lambda_1 for the
        // better-converged half of the spectrum.
        let l1 = pairs.eigenvalues[0];
        for i in 0..pairs.rank() / 2 {
            let hv = hd.apply(&pairs.vectors[i]);
            let rv = qp.prior.apply_precision(&pairs.vectors[i]).unwrap();
            let res = hv.sub(&rv.scale(pairs.eigenvalues[i]));
            let rinv_res = qp.prior.apply_power(&res, -1.0).unwrap();
            let rnorm = res.dot(&rinv_res).sqrt();
            assert!(rnorm <= 0.05 * l1, "pair {i}: residual {rnorm}, l1 {l1}");
        }
    }

    #[test]
    fn matches_dense_generalized_eigensolve() {
        let g = grid(16, 16);
        let qp = QuadraticProblem::build(&QuadraticConfig::default_for(g)).unwrap();
        let hd_op = qp.windowed_misfit_op();
        let pairs = randomized_gen_eig(&hd_op, &qp.prior, 20, 12, 3, 5).unwrap();

        // Dense pencil solve through the prior Cholesky factor.
        let n = g.n();
        let hd = dense_materialize(&hd_op, n).unwrap();
        let p4 = qp.prior.clone();
        let r_op = FnOperator::new(g, move |v| p4.apply_precision(v).unwrap());
        let r = dense_materialize(&r_op, n).unwrap();
        let chol = r.clone().cholesky().unwrap();
        let l_inv = chol.l().try_inverse().unwrap();
        let t = &l_inv * hd * l_inv.transpose();
        let t = (&t + t.transpose()) * 0.5;
        let mut dense_vals: Vec<f64> = nalgebra::SymmetricEigen::new(t).eigenvalues.iter().copied().collect();
        dense_vals.sort_by(|a, b| b.partial_cmp(a).unwrap());

        for i in 0..10 {
            let got = pairs.eigenvalues[i];
            let want = dense_vals[i];
            assert!(
                (got - want).abs() < 0.01 * want.abs().max(1e-12),
                "lambda_{i}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn inverse_apply_edge_cases_and_woodbury_oracle() {
        let g = grid(12, 12);
        let qp = QuadraticProblem::build(&QuadraticConfig::default_for(g)).unwrap();
        let hd = qp.windowed_misfit_op();
        let prior = &qp.prior;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Field {
            grid: g,
            values: (0..g.n()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };

        // r = 0: plain prior covariance apply.
        let empty = GenEigPairs::empty();
        let got = lowrank_posterior_apply_inverse(&empty, prior, &v).unwrap();
        let want = prior.apply_covariance(&v).unwrap();
        assert!(got.sub(&want).max_abs() < 1e-12 * want.max_abs());

        let pairs = randomized_gen_eig(&hd, prior, 10, 8, 2, 9).unwrap();

        // Eigen-direction: v = R v_1 maps to v_1 / (lambda_1 + 1).
        let rv1 = prior.apply_precision(&pairs.vectors[0]).unwrap();
        let got = lowrank_posterior_apply_inverse(&pairs, prior, &rv1).unwrap();
        let want = pairs.vectors[0].scale(1.0 / (pairs.eigenvalues[0] + 1.0));
        assert!(got.sub(&want).max_abs() < 1e-8 * want.max_abs());

        // Dense Woodbury oracle.
        let p5 = prior.clone();
        let r_op = FnOperator::new(g, move |v| p5.apply_precision(v).unwrap());
        let dense_r = dense_materialize(&r_op, g.n()).unwrap();
        let dense_prec = dense_lowrank_precision(&pairs, prior, &dense_r);
        let inv = dense_prec.try_inverse().unwrap();
        let slow = &inv * DVector::from_vec(v.values.clone());
        let fast = lowrank_posterior_apply_inverse(&pairs, prior, &v).unwrap();
        let scale = fast.max_abs();
        for i in 0..g.n() {
            assert!(
                (fast.values[i] - slow[i]).abs() < 1e-8 * scale,
                "at {i}: {} vs {}",
                fast.values[i],
                slow[i]
            );
        }
    }

    #[test]
    fn sampler_covariance_identity_dense() {
        // The sampler is an affine map of white noise; materializing it on
        // noise basis vectors gives its exact covariance, which must equal
        // the Woodbury inverse.
        let g = grid(12, 12);
        let qp = QuadraticProblem::build(&QuadraticConfig::default_for(g)).unwrap();
        let hd = qp.windowed_misfit_op();
        let prior = &qp.prior;
        let pairs = randomized_gen_eig(&hd, prior, 10, 8, 2, 13).unwrap();

        let n = g.n();
        let mut s = DMatrix::zeros(n, n);
        let mut e = Field::zeros(g);
        for j in 0..n {
            e.values[j] = 1.0; // unit noise vector (white noise has cov I/h; h=1 here)
            let col = lowrank_sample_from_noise(&pairs, prior, &e).unwrap();
            for i in 0..n {
                s[(i, j)] = col.values[i];
            }
            e.values[j] = 0.0;
        }
        let cov = &s * s.transpose();

        let p6 = prior.clone();
        let r_op = FnOperator::new(g, move |v| p6.apply_precision(v).unwrap());
        let dense_r = dense_materialize(&r_op, n).unwrap();
        let want = dense_lowrank_precision(&pairs, prior, &dense_r)
            .try_inverse()
            .unwrap();
        let scale = want.abs().max();
        for i in 0..n {
            for j in 0..n {
                assert!(
                    (cov[(i, j)] - want[(i, j)]).abs() < 1e-8 * scale,
                    "cov mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn sampling_deterministic_and_r0_is_prior() {
        let g = grid(8, 8);
        let prior = BiharmonicPrior::new(g, 0.5, 0.7, None).unwrap();
        let empty = GenEigPairs::empty();
        let a = lowrank_sample(&empty, &prior, &mut ChaCha8Rng::seed_from_u64(2));
        let b = lowrank_sample(&empty, &prior, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a.values, b.values);
        // r = 0 reduces to a zero-mean prior draw.
        let c = prior.sample(&mut ChaCha8Rng::seed_from_u64(2));
        assert!(a.sub(&c).max_abs() < 1e-12);
    }

    #[test]
    fn inverse_error_monotone_in_rank() {
        let g = grid(16, 16);
        let qp = QuadraticProblem::build(&QuadraticConfig::default_for(g)).unwrap();
        let hd_op = qp.windowed_misfit_op();
        let n = g.n();
        let hd = dense_materialize(&hd_op, n).unwrap();
        let p7 = qp.prior.clone();
        let r_op = FnOperator::new(g, move |v| p7.apply_precision(v).unwrap());
        let dense_r = dense_materialize(&r_op, n).unwrap();
        let h = g.cell_area();
        let exact_inv = ((dense_r.clone() + &hd) * h).try_inverse().unwrap();

        let mut errs = Vec::new();
        for r in [5usize, 10, 20, 40] {
            let pairs = randomized_gen_eig(&hd_op, &qp.prior, r, 10, 2, 21).unwrap();
            // Dense apply of the approximate inverse over the identity.
            let mut approx = DMatrix::zeros(n, n);
            let mut e = Field::zeros(g);
            for j in 0..n {
                e.values[j] = 1.0;
                let col = lowrank_posterior_apply_inverse(&pairs, &qp.prior, &e).unwrap();
                for i in 0..n {
                    approx[(i, j)] = col.values[i] / h; // value-space covariance
                }
                e.values[j] = 0.0;
            }
            let err = (&approx - &exact_inv).norm() / exact_inv.norm();
            errs.push(err);
        }
        for w in errs.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-8),
                "inverse error not monotone: {errs:?}"
            );
        }
        assert!(errs[3] < errs[0], "more rank should help: {errs:?}");
    }
}

/// gpCN reference built on the low-rank posterior formulas: exact sampler
/// and exact quadratic form of the same Gaussian.
pub struct LowRankReference {
    pub center: Field,
    pub pairs: GenEigPairs,
    pub prior: BiharmonicPrior,
}

impl crate::laplace::GaussianReference for LowRankReference {
    fn center(&self) -> &Field {
        &self.center
    }
    fn draw_fluctuation(&self, rng: &mut ChaCha8Rng) -> Field {
        lowrank_sample(&self.pairs, &self.prior, rng)
    }
    fn quad_form_centered(&self, v: &Field) -> Result<f64> {
        lowrank_quad_form(&self.pairs, &self.prior, v)
    }
}
