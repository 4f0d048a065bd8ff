//! Biharmonic Matérn prior: precision R = (delta*I - gamma*Laplacian)^2.
//!
//! The Laplacian is the periodic spectral one (symbol -|xi|^2), so every real
//! power of R is an exact Fourier multiplier (delta + gamma*|xi|^2)^(2s).
//! That makes solves and square roots as cheap as applies, which the samplers
//! lean on heavily.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::fft::{forward_transform, inverse_transform};
use crate::grid::{freq_coords, Field, Grid2D};

#[derive(Debug, Clone)]
pub struct BiharmonicPrior {
    pub grid: Grid2D,
    pub delta: f64,
    pub gamma: f64,
    pub mean: Field,
    /// (delta + gamma*|xi|^2) on the frequency grid; R^s multiplies by its 2s power.
    half_symbol: Vec<f64>,
}

impl BiharmonicPrior {
    pub fn new(grid: Grid2D, delta: f64, gamma: f64, mean: Option<Field>) -> Result<Self> {
        assert!(delta > 0.0 && gamma > 0.0, "ellipticity requires delta, gamma > 0");
        let mean = mean.unwrap_or_else(|| Field::zeros(grid));
        grid.check_match(&mean.grid)?;
        let fg = freq_coords(&grid);
        let mut half_symbol = Vec::with_capacity(grid.n());
        for jz in 0..grid.nz {
            for jx in 0..grid.nx {
                let m = fg.magnitude(jx, jz);
                half_symbol.push(delta + gamma * m * m);
            }
        }
        Ok(Self {
            grid,
            delta,
            gamma,
            mean,
            half_symbol,
        })
    }

    /// Applies R^s as a spectral multiplier; s = 1 is the precision itself.
    pub fn apply_power(&self, m: &Field, s: f64) -> Result<Field> {
        self.grid.check_match(&m.grid)?;
        let mut hat = forward_transform(m);
        for (v, h) in hat.values.iter_mut().zip(&self.half_symbol) {
            *v *= h.powf(2.0 * s);
        }
        inverse_transform(&hat)
    }

    /// R m = (delta*I - gamma*Laplacian)^2 m.
    pub fn apply_precision(&self, m: &Field) -> Result<Field> {
        self.apply_power(m, 1.0)
    }

    /// Covariance apply, R^-1 m.
    pub fn apply_covariance(&self, m: &Field) -> Result<Field> {
        self.apply_power(m, -1.0)
    }

    /// Draws mean + R^(-1/2) w with w discrete white noise (see [`white_noise`]).
    pub fn sample(&self, rng: &mut impl Rng) -> Field {
        let w = white_noise(self.grid, rng);
        let fluct = self
            .apply_power(&w, -0.5)
            .expect("white noise lives on the prior grid");
        self.mean.add(&fluct)
    }
}

/// Discrete white noise: iid N(0, 1/(dx*dz)) per grid point, the
/// discretization of unit-intensity continuum white noise. Its quadratic form
/// under the area-weighted norm is a standard chi-square.
pub fn white_noise(grid: Grid2D, rng: &mut impl Rng) -> Field {
    let s = 1.0 / grid.cell_area().sqrt();
    Field {
        grid,
        values: (0..grid.n())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * s
            })
            .collect(),
    }
}
