//! PSF+ fusion: an SVD basis for the symbol row space, spatial coefficients
//! initialized from the PSF interpolation and refined against the PDO symbol
//! columns through a Tikhonov-regularized least squares problem.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{CoreError, Result};
use crate::grid::{Field, Grid2D};
use crate::psido::LowRankSymbol;

/// Result of the PSF+ build, with the diagnostics a caller may want to log.
#[derive(Debug, Clone)]
pub struct PsfPlusBuild {
    pub symbol: LowRankSymbol,
    /// Singular values of the sampled row matrix, descending.
    pub singular_values: Vec<f64>,
    /// Regularization weight actually used.
    pub alpha: f64,
    /// Largest relative imaginary part discarded when forming the real
    /// spatial coefficients.
    pub imag_residual: f64,
}

/// Picks the basis rank by a relative singular-value threshold.
pub fn rank_by_threshold(singular_values: &[f64], threshold: f64) -> usize {
    let s1 = singular_values.first().copied().unwrap_or(0.0);
    singular_values
        .iter()
        .filter(|&&s| s > threshold * s1)
        .count()
        .max(1)
}

/// Singular values of the sampled rows, computed on the stacked
/// real/imaginary representation (identical to the complex singular values
/// because the row Gram matrix of Hermitian-symmetric rows is real).
pub fn row_singular_values(rows: &DMatrix<Complex64>) -> Vec<f64> {
    let (r, n) = (rows.nrows(), rows.ncols());
    let mut stacked = DMatrix::zeros(r, 2 * n);
    for i in 0..r {
        for j in 0..n {
            stacked[(i, j)] = rows[(i, j)].re;
            stacked[(i, n + j)] = rows[(i, j)].im;
        }
    }
    let mut sigma: Vec<f64> = stacked.singular_values().iter().copied().collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sigma
}

/// Left singular vectors and singular values of the complex row matrix via
/// the small row Gram matrix. The Gram is real for Hermitian-symmetric rows;
/// any imaginary residue is discarded. The large-side SVD is avoided: it is
/// not reliable for exactly rank-deficient row sets.
fn gram_left_svd(rows: &DMatrix<Complex64>) -> (DMatrix<f64>, Vec<f64>) {
    let r = rows.nrows();
    let n = rows.ncols();
    let mut gram = DMatrix::zeros(r, r);
    for a in 0..r {
        for b in 0..r {
            let mut acc = 0.0;
            for j in 0..n {
                acc += (rows[(a, j)] * rows[(b, j)].conj()).re;
            }
            gram[(a, b)] = acc;
        }
    }
    gram = (gram.clone() + gram.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let sigma: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let mut u_sorted = DMatrix::zeros(r, r);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..r {
            u_sorted[(i, dst)] = eig.eigenvectors[(i, src)];
        }
    }
    (u_sorted, sigma)
}

/// Builds the PSF+ low-rank symbol.
///
/// * `rows` — sampled symbol rows (r_rows x N), from the PSF pass.
/// * `row_weights` — the PSF interpolation weight fields, one per row.
/// * `cols` — sampled symbol columns (N x r_c), from the PDO pass.
/// * `col_freqs` — frequency index pairs of the sampled columns.
/// * `basis_rank` — number of SVD basis vectors kept from the rows.
/// * `alpha_override` — replaces the default balance rule
///   alpha = |B[:,Ic]|_F^2 / |B|_F^2 when set.
pub fn build_psf_plus(
    grid: &Grid2D,
    rows: &DMatrix<Complex64>,
    row_weights: &[Field],
    cols: &DMatrix<Complex64>,
    col_freqs: &[(usize, usize)],
    basis_rank: usize,
    alpha_override: Option<f64>,
) -> Result<PsfPlusBuild> {
    let r_rows = rows.nrows();
    let n = rows.ncols();
    if basis_rank > r_rows {
        return Err(CoreError::RankTooLarge {
            rank: basis_rank,
            rows: r_rows,
        });
    }
    if row_weights.len() != r_rows {
        return Err(CoreError::InvalidGrid(format!(
            "{} weights for {} rows",
            row_weights.len(),
            r_rows
        )));
    }
    if cols.ncols() != col_freqs.len() || cols.nrows() != n {
        return Err(CoreError::InvalidGrid("column matrix shape mismatch".into()));
    }

    let (u, sigma) = gram_left_svd(rows);
    // Guard against dividing by a numerically zero singular value; the Gram
    // route resolves ratios down to about 1e-8.
    let floor = sigma[0].max(f64::MIN_POSITIVE) * 1e-7;
    let rank = basis_rank.min(sigma.iter().filter(|&&s| s > floor).count().max(1));

    // B = Sigma_r^-1 U_r^T rows (rank x N, complex).
    let mut basis = DMatrix::zeros(rank, n);
    for l in 0..rank {
        let inv_s = 1.0 / sigma[l];
        for j in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in 0..r_rows {
                acc += u[(k, l)] * rows[(k, j)];
            }
            basis[(l, j)] = acc * inv_s;
        }
    }

    // A0 = W U_r Sigma_r (N x rank, real).
    let mut a0 = DMatrix::zeros(n, rank);
    for l in 0..rank {
        for k in 0..r_rows {
            let coef = u[(k, l)] * sigma[l];
            for i in 0..n {
                a0[(i, l)] += row_weights[k].values[i] * coef;
            }
        }
    }

    // Sampled-column slices of the basis.
    let r_c = col_freqs.len();
    let mut basis_c = DMatrix::zeros(rank, r_c);
    for (cj, &(jx, jz)) in col_freqs.iter().enumerate() {
        let idx = grid.checked_idx(jx, jz)?;
        for l in 0..rank {
            basis_c[(l, cj)] = basis[(l, idx)];
        }
    }

    let alpha = alpha_override.unwrap_or_else(|| {
        let num: f64 = basis_c.iter().map(|c| c.norm_sqr()).sum();
        let den: f64 = basis.iter().map(|c| c.norm_sqr()).sum();
        num / den
    });

    // Real-restricted closed form:
    //   A = (Re(S_c B_c^H) + alpha A0) (Re(B_c B_c^H) + alpha I)^-1.
    // With antipodally paired columns of a real operator, the imaginary
    // parts cancel and this equals the unrestricted minimizer.
    let peak = cols.iter().fold(0.0f64, |m, c| m.max(c.norm()));
    let mut imag = 0.0f64;
    let mut gram = DMatrix::zeros(rank, rank);
    for a in 0..rank {
        for b in 0..rank {
            let mut acc = Complex64::new(0.0, 0.0);
            for c in 0..r_c {
                acc += basis_c[(a, c)] * basis_c[(b, c)].conj();
            }
            imag = imag.max(acc.im.abs() / (acc.norm() + 1e-300));
            gram[(a, b)] = acc.re;
        }
        gram[(a, a)] += alpha;
    }
    let mut rhs = a0.scale(alpha);
    for i in 0..n {
        for l in 0..rank {
            let mut acc = Complex64::new(0.0, 0.0);
            for c in 0..r_c {
                acc += cols[(i, c)] * basis_c[(l, c)].conj();
            }
            rhs[(i, l)] += acc.re;
        }
    }
    let col_imag = cols.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    if peak > 0.0 {
        imag = imag.max(col_imag / peak);
    }

    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| CoreError::Format("PSF+ normal equations not positive definite".into()))?;
    let gram_inv = chol.inverse();
    let coeffs = &rhs * &gram_inv;

    let spatial: Vec<Field> = (0..rank)
        .map(|l| Field {
            grid: *grid,
            values: (0..n).map(|i| coeffs[(i, l)]).collect(),
        })
        .collect();
    let freq: Vec<Vec<Complex64>> = (0..rank)
        .map(|l| (0..n).map(|j| basis[(l, j)]).collect())
        .collect();

    Ok(PsfPlusBuild {
        symbol: LowRankSymbol::new(*grid, spatial, freq)?,
        singular_values: sigma,
        alpha,
        imag_residual: imag,
    })
}
