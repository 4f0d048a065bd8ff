//! Regular 2D grid, real-valued fields, and the frequency coordinate layout.
//!
//! Every module in the crate shares one index convention: values are stored
//! row-major with z as the outer (slow) index, `idx = iz * nx + ix`. Frequency
//! arrays use the standard unshifted DFT order, with angular frequencies
//! `2*pi*j/(n*d)` for j in the symmetric range [-n/2, n/2).

use crate::error::{CoreError, Result};

/// Regular 2D spatial grid: `nx` points with spacing `dx` (meters) along x,
/// `nz` points with spacing `dz` along depth z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub dz: f64,
}

impl Grid2D {
    pub fn new(nx: usize, nz: usize, dx: f64, dz: f64) -> Result<Self> {
        if nx < 4 || nz < 4 {
            return Err(CoreError::InvalidGrid(format!(
                "need nx >= 4 and nz >= 4, got {nx}x{nz}"
            )));
        }
        if !(dx > 0.0) || !(dz > 0.0) {
            return Err(CoreError::InvalidGrid(format!(
                "need dx > 0 and dz > 0, got ({dx}, {dz})"
            )));
        }
        Ok(Self { nx, nz, dx, dz })
    }

    /// Total point count N = nx * nz.
    pub fn n(&self) -> usize {
        self.nx * self.nz
    }

    /// Cell area dx * dz, the quadrature weight of the grid inner product.
    pub fn cell_area(&self) -> f64 {
        self.dx * self.dz
    }

    /// Physical extent along x.
    pub fn x_max(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    /// Physical extent along z.
    pub fn z_max(&self) -> f64 {
        self.nz as f64 * self.dz
    }

    pub fn idx(&self, ix: usize, iz: usize) -> usize {
        debug_assert!(ix < self.nx && iz < self.nz);
        iz * self.nx + ix
    }

    pub fn checked_idx(&self, ix: usize, iz: usize) -> Result<usize> {
        if ix >= self.nx || iz >= self.nz {
            return Err(CoreError::IndexOutOfRange {
                ix,
                iz,
                nx: self.nx,
                nz: self.nz,
            });
        }
        Ok(self.idx(ix, iz))
    }

    /// Spatial coordinates (x, z) of a grid point.
    pub fn coords(&self, ix: usize, iz: usize) -> (f64, f64) {
        (ix as f64 * self.dx, iz as f64 * self.dz)
    }

    pub fn same_as(&self, other: &Grid2D) -> bool {
        self.nx == other.nx
            && self.nz == other.nz
            && (self.dx - other.dx).abs() < 1e-12
            && (self.dz - other.dz).abs() < 1e-12
    }

    pub(crate) fn check_match(&self, other: &Grid2D) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(CoreError::GridMismatch {
                expected_nx: self.nx,
                expected_nz: self.nz,
                got_nx: other.nx,
                got_nz: other.nz,
            })
        }
    }
}

/// Real-valued function sampled on a [`Grid2D`], stored z-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n()],
        }
    }

    pub fn constant(grid: Grid2D, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.n()],
        }
    }

    pub fn from_values(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n() {
            return Err(CoreError::InvalidGrid(format!(
                "field length {} does not match grid N = {}",
                values.len(),
                grid.n()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidGrid("field contains non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    /// Builds a field from a closure of the physical coordinates (x, z).
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n());
        for iz in 0..grid.nz {
            for ix in 0..grid.nx {
                let (x, z) = grid.coords(ix, iz);
                values.push(f(x, z));
            }
        }
        Self { grid, values }
    }

    pub fn at(&self, ix: usize, iz: usize) -> f64 {
        self.values[self.grid.idx(ix, iz)]
    }

    pub fn at_mut(&mut self, ix: usize, iz: usize) -> &mut f64 {
        &mut self.values[self.grid.idx(ix, iz)]
    }

    /// Area-weighted inner product `sum(u * v) * dx * dz`.
    pub fn dot(&self, other: &Field) -> f64 {
        debug_assert!(self.grid.same_as(&other.grid));
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        s * self.grid.cell_area()
    }

    /// Area-weighted L2 norm.
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, c: f64) -> Field {
        Field {
            grid: self.grid,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Field) -> Field {
        debug_assert!(self.grid.same_as(&other.grid));
        Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Field) -> Field {
        debug_assert!(self.grid.same_as(&other.grid));
        Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// self += c * other, in place.
    pub fn axpy(&mut self, c: f64, other: &Field) {
        debug_assert!(self.grid.same_as(&other.grid));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
    }

    /// Pointwise product.
    pub fn hadamard(&self, other: &Field) -> Field {
        debug_assert!(self.grid.same_as(&other.grid));
        Field {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Angular frequency coordinates matching the DFT index layout of a grid.
#[derive(Debug, Clone)]
pub struct FreqGrid {
    pub grid: Grid2D,
    /// xi_x[j] = 2*pi*jj/(nx*dx) with jj in [-nx/2, nx/2), unshifted order.
    pub xi_x: Vec<f64>,
    pub xi_z: Vec<f64>,
}

impl FreqGrid {
    /// |xi| at a frequency index pair.
    pub fn magnitude(&self, jx: usize, jz: usize) -> f64 {
        let x = self.xi_x[jx];
        let z = self.xi_z[jz];
        (x * x + z * z).sqrt()
    }

    /// arg xi = atan2(xi_z, xi_x); zero at the origin.
    pub fn angle(&self, jx: usize, jz: usize) -> f64 {
        let x = self.xi_x[jx];
        let z = self.xi_z[jz];
        if x == 0.0 && z == 0.0 {
            0.0
        } else {
            z.atan2(x)
        }
    }

    /// Frequency cell sizes (d_xi_x, d_xi_z).
    pub fn cell(&self) -> (f64, f64) {
        (
            2.0 * std::f64::consts::PI / (self.grid.nx as f64 * self.grid.dx),
            2.0 * std::f64::consts::PI / (self.grid.nz as f64 * self.grid.dz),
        )
    }

    /// Minimal-image frequency distance between two index pairs, accounting
    /// for the periodicity of the DFT frequency lattice.
    pub fn wrapped_distance(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let (dxi_x, dxi_z) = self.cell();
        let lx = self.grid.nx as f64 * dxi_x;
        let lz = self.grid.nz as f64 * dxi_z;
        let mut dx = self.xi_x[a.0] - self.xi_x[b.0];
        let mut dz = self.xi_z[a.1] - self.xi_z[b.1];
        dx -= lx * (dx / lx).round();
        dz -= lz * (dz / lz).round();
        (dx * dx + dz * dz).sqrt()
    }
}

fn dft_frequencies(n: usize, d: f64) -> Vec<f64> {
    let step = 2.0 * std::f64::consts::PI / (n as f64 * d);
    (0..n)
        .map(|j| {
            let jj = if j <= (n - 1) / 2 {
                j as i64
            } else {
                j as i64 - n as i64
            };
            jj as f64 * step
        })
        .collect()
}

/// Angular frequency coordinates for a grid, in unshifted DFT order.
pub fn freq_coords(grid: &Grid2D) -> FreqGrid {
    FreqGrid {
        grid: *grid,
        xi_x: dft_frequencies(grid.nx, grid.dx),
        xi_z: dft_frequencies(grid.nz, grid.dz),
    }
}
