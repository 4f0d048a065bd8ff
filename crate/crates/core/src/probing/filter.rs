//! High-pass filtering of operators before probing, and the pointwise
//! square-root sample transform used to build SPD factors.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::grid::{freq_coords, Field, Grid2D};
use crate::psido::LinearOperator;

/// Raised-cosine high-pass filter in |xi|: 0 below cutoff - width/2, 1 above
/// cutoff + width/2.
#[derive(Debug, Clone, Copy)]
pub struct HighPassSpec {
    pub cutoff: f64,
    pub transition_width: f64,
}

impl HighPassSpec {
    pub fn new(cutoff: f64, transition_width: f64) -> Self {
        assert!(cutoff > 0.0, "cutoff must be positive");
        assert!(transition_width >= 0.0);
        Self {
            cutoff,
            transition_width,
        }
    }

    /// Filter value at frequency magnitude rho.
    pub fn multiplier(&self, rho: f64) -> f64 {
        let lo = self.cutoff - self.transition_width / 2.0;
        let hi = self.cutoff + self.transition_width / 2.0;
        if rho <= lo {
            0.0
        } else if rho >= hi {
            1.0
        } else {
            0.5 * (1.0 - (std::f64::consts::PI * (hi - rho) / (hi - lo)).cos())
        }
    }

    /// Filter values on the whole frequency grid.
    pub fn multiplier_grid(&self, grid: &Grid2D) -> Vec<f64> {
        let fg = freq_coords(grid);
        let mut q = Vec::with_capacity(grid.n());
        for jz in 0..grid.nz {
            for jx in 0..grid.nx {
                q.push(self.multiplier(fg.magnitude(jx, jz)));
            }
        }
        q
    }
}

/// Applies the filter multiplier Q to a field.
pub fn apply_highpass(hp: &HighPassSpec, v: &Field) -> Field {
    let q = hp.multiplier_grid(&v.grid);
    crate::fft::apply_real_even_multiplier(v, &q)
}

/// v -> Q H (Q v): the filtered operator probed by the PSF and PDO methods.
/// Symmetric whenever H is.
pub struct HighPassedOperator<'a> {
    inner: &'a dyn LinearOperator,
    hp: HighPassSpec,
}

pub fn wrap_highpass<'a>(inner: &'a dyn LinearOperator, hp: HighPassSpec) -> HighPassedOperator<'a> {
    HighPassedOperator { inner, hp }
}

impl LinearOperator for HighPassedOperator<'_> {
    fn grid(&self) -> Grid2D {
        self.inner.grid()
    }

    fn apply(&self, v: &Field) -> Field {
        let qv = apply_highpass(&self.hp, v);
        apply_highpass(&self.hp, &self.inner.apply(&qv))
    }

    fn apply_transpose(&self, v: &Field) -> Field {
        let qv = apply_highpass(&self.hp, v);
        apply_highpass(&self.hp, &self.inner.apply_transpose(&qv))
    }
}

/// Entrywise sqrt(max(Re(s), 0)); imaginary parts are dropped and their
/// largest relative magnitude is reported alongside the result.
pub fn pointwise_sqrt_samples(samples: &DMatrix<Complex64>) -> (DMatrix<f64>, f64) {
    let peak = samples.iter().fold(0.0f64, |m, c| m.max(c.norm()));
    let mut imag = 0.0f64;
    let out = DMatrix::from_fn(samples.nrows(), samples.ncols(), |i, j| {
        let c = samples[(i, j)];
        imag = imag.max(c.im.abs());
        c.re.max(0.0).sqrt()
    });
    let residual = if peak > 0.0 { imag / peak } else { 0.0 };
    (out, residual)
}
