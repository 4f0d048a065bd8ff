//! 2D Fourier transforms with the phase-space scaling convention used
//! throughout the crate.
//!
//! The continuous convention is
//!   v_hat(xi) = 1/(2*pi)^2 * integral e^{-i x.xi} v(x) dx,
//!   v(x)      =             integral e^{+i x.xi} v_hat(xi) dxi,
//! discretized on the periodic grid as a DFT scaled by dx*dz/(2*pi)^2 and an
//! inverse DFT scaled by (2*pi)^2/(dx*dz*nx*nz). The pair is an exact inverse
//! and makes the PSF-to-symbol-row factor exactly (2*pi)^2 with no leftover
//! constants.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{CoreError, Result};
use crate::grid::{Field, Grid2D};

/// Complex function on the frequency grid of a [`Grid2D`], same z-major
/// layout as [`Field`], frequencies in unshifted DFT order.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub grid: Grid2D,
    pub values: Vec<Complex64>,
}

impl Spectrum {
    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.n()],
        }
    }

    pub fn at(&self, jx: usize, jz: usize) -> Complex64 {
        self.values[self.grid.idx(jx, jz)]
    }

    pub fn at_mut(&mut self, jx: usize, jz: usize) -> &mut Complex64 {
        let i = self.grid.idx(jx, jz);
        &mut self.values[i]
    }

    /// Largest deviation |s(-k) - conj(s(k))| relative to the peak magnitude.
    pub fn hermitian_residual(&self) -> f64 {
        let (nx, nz) = (self.grid.nx, self.grid.nz);
        let peak = self.values.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        if peak == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for jz in 0..nz {
            for jx in 0..nx {
                let m = self.values[self.grid.idx((nx - jx) % nx, (nz - jz) % nz)];
                let v = self.values[self.grid.idx(jx, jz)];
                worst = worst.max((m - v.conj()).norm());
            }
        }
        worst / peak
    }
}

struct Plans {
    fwd_x: Arc<dyn Fft<f64>>,
    fwd_z: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    inv_z: Arc<dyn Fft<f64>>,
}

fn plans_for(nx: usize, nz: usize) -> Arc<Plans> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Plans>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    map.entry((nx, nz))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            Arc::new(Plans {
                fwd_x: planner.plan_fft_forward(nx),
                fwd_z: planner.plan_fft_forward(nz),
                inv_x: planner.plan_fft_inverse(nx),
                inv_z: planner.plan_fft_inverse(nz),
            })
        })
        .clone()
}

static FWD_COUNT: AtomicU64 = AtomicU64::new(0);
static INV_COUNT: AtomicU64 = AtomicU64::new(0);

/// Running counts of (forward, inverse) 2D transforms, for cost assertions.
pub fn transform_counts() -> (u64, u64) {
    (
        FWD_COUNT.load(Ordering::Relaxed),
        INV_COUNT.load(Ordering::Relaxed),
    )
}

/// Unnormalized 2D DFT in place: rows along x, then columns along z.
fn dft2_inplace(data: &mut [Complex64], grid: &Grid2D, forward: bool) {
    let plans = plans_for(grid.nx, grid.nz);
    let (px, pz) = if forward {
        (&plans.fwd_x, &plans.fwd_z)
    } else {
        (&plans.inv_x, &plans.inv_z)
    };
    for row in data.chunks_exact_mut(grid.nx) {
        px.process(row);
    }
    // Columns via a transpose buffer; nz-length lines are strided otherwise.
    let mut col = vec![Complex64::new(0.0, 0.0); grid.nz];
    for ix in 0..grid.nx {
        for iz in 0..grid.nz {
            col[iz] = data[iz * grid.nx + ix];
        }
        pz.process(&mut col);
        for iz in 0..grid.nz {
            data[iz * grid.nx + ix] = col[iz];
        }
    }
}

/// Forward transform of a real field under the crate convention.
pub fn forward_transform(f: &Field) -> Spectrum {
    FWD_COUNT.fetch_add(1, Ordering::Relaxed);
    let scale = f.grid.cell_area() / (2.0 * std::f64::consts::PI).powi(2);
    let mut data: Vec<Complex64> = f.values.iter().map(|&v| Complex64::new(v * scale, 0.0)).collect();
    dft2_inplace(&mut data, &f.grid, true);
    Spectrum {
        grid: f.grid,
        values: data,
    }
}

/// Forward transform of an already-complex array (same scaling).
pub fn forward_transform_complex(grid: &Grid2D, values: &[Complex64]) -> Spectrum {
    FWD_COUNT.fetch_add(1, Ordering::Relaxed);
    let scale = grid.cell_area() / (2.0 * std::f64::consts::PI).powi(2);
    let mut data: Vec<Complex64> = values.iter().map(|v| v * scale).collect();
    dft2_inplace(&mut data, grid, true);
    Spectrum {
        grid: *grid,
        values: data,
    }
}

/// Inverse transform without the realness check; returns complex values.
pub fn inverse_transform_complex(s: &Spectrum) -> Vec<Complex64> {
    INV_COUNT.fetch_add(1, Ordering::Relaxed);
    let scale = (2.0 * std::f64::consts::PI).powi(2)
        / (s.grid.cell_area() * s.grid.n() as f64);
    let mut data = s.values.clone();
    dft2_inplace(&mut data, &s.grid, false);
    for v in &mut data {
        *v *= scale;
    }
    data
}

/// Inverse transform to a real field. Errors if the imaginary residual shows
/// the spectrum was not Hermitian-symmetric.
pub fn inverse_transform(s: &Spectrum) -> Result<Field> {
    let data = inverse_transform_complex(s);
    let peak = data.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    let imag = data.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    let tolerance = 1e-10;
    if peak > 0.0 && imag / peak > tolerance {
        // A numerically zero output makes the output-relative ratio
        // meaningless; fall back to the symmetry of the input itself.
        let input_residual = s.hermitian_residual();
        if input_residual > tolerance {
            return Err(CoreError::NonHermitianInput {
                residual: input_residual,
                tolerance,
            });
        }
    }
    Ok(Field {
        grid: s.grid,
        values: data.into_iter().map(|v| v.re).collect(),
    })
}

/// Applies a real, even (magnitude-only) Fourier multiplier to a real field.
/// Such a multiplier preserves Hermitian symmetry exactly, so the imaginary
/// output is roundoff at the scale of the input field and is discarded
/// without a relative check (which would be meaningless when the multiplier
/// annihilates the field).
pub fn apply_real_even_multiplier(f: &Field, multiplier: &[f64]) -> Field {
    debug_assert_eq!(multiplier.len(), f.grid.n());
    let mut hat = forward_transform(f);
    for (v, m) in hat.values.iter_mut().zip(multiplier) {
        *v *= m;
    }
    let data = inverse_transform_complex(&hat);
    Field {
        grid: f.grid,
        values: data.into_iter().map(|v| v.re).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::freq_coords;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const TAU: f64 = 2.0 * std::f64::consts::PI;

    fn random_field(grid: Grid2D, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field {
            grid,
            values: (0..grid.n()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn constant_field_concentrates_at_zero_frequency() {
        let g = Grid2D::new(8, 6, 0.5, 1.5).unwrap();
        let s = forward_transform(&Field::constant(g, 1.0));
        let expected = g.n() as f64 * g.cell_area() / TAU.powi(2);
        assert!((s.at(0, 0).re - expected).abs() < 1e-12 * expected);
        assert!(s.at(0, 0).im.abs() < 1e-12);
        for (i, v) in s.values.iter().enumerate() {
            if i != 0 {
                assert!(v.norm() < 1e-12, "leakage at index {i}: {v}");
            }
        }
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let g = Grid2D::new(8, 8, 2.0, 0.25).unwrap();
        let mut f = Field::zeros(g);
        *f.at_mut(3, 5) = 1.0 / g.cell_area();
        let s = forward_transform(&f);
        let expected = 1.0 / TAU.powi(2);
        for v in &s.values {
            assert!((v.norm() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_identity_across_grid_sizes() {
        for &(nx, nz) in &[(8, 8), (16, 12), (32, 32), (128, 64)] {
            let g = Grid2D::new(nx, nz, 0.7, 1.3).unwrap();
            let f = random_field(g, nx as u64 * 1000 + nz as u64);
            let back = inverse_transform(&forward_transform(&f)).unwrap();
            let scale = f.max_abs();
            for (a, b) in f.values.iter().zip(&back.values) {
                assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b} on {nx}x{nz}");
            }
        }
    }

    #[test]
    fn single_zero_frequency_entry_gives_constant_field() {
        let g = Grid2D::new(8, 8, 1.0, 1.0).unwrap();
        let mut s = Spectrum::zeros(g);
        *s.at_mut(0, 0) = Complex64::new(3.0, 0.0);
        let f = inverse_transform(&s).unwrap();
        let expected = 3.0 * TAU.powi(2) / (g.cell_area() * g.n() as f64);
        for v in &f.values {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn hermitian_pair_gives_real_cosine() {
        let g = Grid2D::new(16, 16, 1.0, 1.0).unwrap();
        let fg = freq_coords(&g);
        let mut s = Spectrum::zeros(g);
        // Conjugate pair at +/- (jx=3, jz=2).
        *s.at_mut(3, 2) = Complex64::new(0.5, 0.0);
        *s.at_mut(13, 14) = Complex64::new(0.5, 0.0);
        let f = inverse_transform(&s).unwrap();
        let amp = TAU.powi(2) / (g.cell_area() * g.n() as f64);
        for iz in 0..g.nz {
            for ix in 0..g.nx {
                let (x, z) = g.coords(ix, iz);
                let want = amp * (fg.xi_x[3] * x + fg.xi_z[2] * z).cos();
                assert!((f.at(ix, iz) - want).abs() < 1e-12, "at ({ix},{iz})");
            }
        }
    }

    #[test]
    fn non_hermitian_spectrum_rejected_for_real_output() {
        let g = Grid2D::new(8, 8, 1.0, 1.0).unwrap();
        let mut s = Spectrum::zeros(g);
        *s.at_mut(1, 0) = Complex64::new(1.0, 0.0); // no conjugate partner
        match inverse_transform(&s) {
            Err(CoreError::NonHermitianInput { .. }) => {}
            other => panic!("expected NonHermitianInput, got {other:?}"),
        }
    }

    #[test]
    fn transform_is_linear() {
        let g = Grid2D::new(12, 8, 1.0, 2.0).unwrap();
        let f = random_field(g, 1);
        let h = random_field(g, 2);
        let (a, b) = (1.7, -0.3);
        let combo = forward_transform(&f.scale(a).add(&h.scale(b)));
        let sf = forward_transform(&f);
        let sh = forward_transform(&h);
        for i in 0..g.n() {
            let want = sf.values[i] * a + sh.values[i] * b;
            assert!((combo.values[i] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn parseval_with_chosen_scaling() {
        let g = Grid2D::new(16, 24, 0.8, 1.1).unwrap();
        let f = random_field(g, 7);
        let s = forward_transform(&f);
        let spatial: f64 = f.values.iter().map(|v| v * v).sum::<f64>() * g.cell_area();
        let (dxi_x, dxi_z) = freq_coords(&g).cell();
        let spectral: f64 =
            s.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * dxi_x * dxi_z * TAU.powi(2);
        assert!(
            (spatial - spectral).abs() < 1e-10 * spatial,
            "{spatial} vs {spectral}"
        );
    }

    #[test]
    fn hermitian_residual_detects_real_origin() {
        let g = Grid2D::new(10, 6, 1.0, 1.0).unwrap();
        let s = forward_transform(&random_field(g, 3));
        assert!(s.hermitian_residual() < 1e-12);
    }
}
