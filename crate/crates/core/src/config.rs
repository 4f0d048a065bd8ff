//! Flat sectioned key-value configuration (INI-style) and the pipeline
//! parameter set parsed from it.
//!
//! Grammar: `[section]` headers, `key = value` lines, `#` comments anywhere,
//! `;` comments on their own line (the semicolon separates probe points in
//! values), blank lines ignored. Keys may contain dots (`psf.points_x`).
//! Values are parsed on demand with typed getters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::grid::Grid2D;
use crate::quadratic::QuadraticConfig;

#[derive(Debug, Clone, Default)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(CoreError::Config(format!(
                        "line {}: malformed section header {raw:?}",
                        lineno + 1
                    )));
                }
                current = line[1..line.len() - 1].trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CoreError::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            sections
                .entry(current.clone())
                .or_default()
                .insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|s| s.as_str())
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        match self.get(section, key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| {
                CoreError::Config(format!("[{section}] {key} = {s:?} is not a number"))
            }),
        }
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        match self.get(section, key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| {
                CoreError::Config(format!("[{section}] {key} = {s:?} is not an integer"))
            }),
        }
    }

    pub fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        match self.get(section, key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| {
                CoreError::Config(format!("[{section}] {key} = {s:?} is not an integer"))
            }),
        }
    }

    pub fn f64_opt(&self, section: &str, key: &str) -> Result<Option<f64>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|_| {
                CoreError::Config(format!("[{section}] {key} = {s:?} is not a number"))
            }),
        }
    }

    pub fn usize_opt(&self, section: &str, key: &str) -> Result<Option<usize>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(s) => s.parse().map(Some).map_err(|_| {
                CoreError::Config(format!("[{section}] {key} = {s:?} is not an integer"))
            }),
        }
    }
}

/// Probe-point list syntax: `ix,iz; ix,iz; ...`.
fn parse_points(s: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for part in s.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let Some((a, b)) = part.split_once(',') else {
            return Err(CoreError::Config(format!("bad point {part:?}")));
        };
        let ix = a.trim().parse().map_err(|_| CoreError::Config(format!("bad point {part:?}")))?;
        let iz = b.trim().parse().map_err(|_| CoreError::Config(format!("bad point {part:?}")))?;
        out.push((ix, iz));
    }
    Ok(out)
}

/// Everything a pipeline run needs, with spec defaults filled in.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub grid: Grid2D,
    pub model: QuadraticConfig,
    pub target_file: Option<PathBuf>,
    pub prior_mean_file: Option<PathBuf>,

    pub psf_points_x: usize,
    pub psf_points_z: usize,
    pub psf_radius: Option<usize>,
    pub pdo_n_angles: usize,
    pub pdo_rho0: Option<f64>,
    pub pdo_band: Option<(f64, f64, f64, f64)>,
    pub highpass_cutoff_frac: f64,
    pub highpass_width_frac: f64,
    pub psfplus_basis_rank: Option<usize>,
    pub psfplus_sv_threshold: f64,

    pub lowrank_rank: usize,
    pub lowrank_oversample: usize,
    pub lowrank_power_iters: usize,

    pub correction_rank: usize,
    pub correction_oversample: usize,
    pub correction_power_iters: usize,

    pub lbfgs_memory: usize,
    pub lbfgs_max_iters: usize,
    pub lbfgs_tol: f64,

    pub chain_beta: Option<f64>,
    pub chain_n_samples: usize,
    pub chain_burn_in: usize,
    pub chain_thin: usize,
    pub probe_points: Vec<(usize, usize)>,

    pub output_dir: PathBuf,
    pub global_seed: u64,
}

impl PipelineConfig {
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        let nx = ini.usize_or("model", "nx", 64)?;
        let nz = ini.usize_or("model", "nz", 32)?;
        let dx = ini.f64_or("model", "dx", 1.0)?;
        let dz = ini.f64_or("model", "dz", 1.0)?;
        let grid = Grid2D::new(nx, nz, dx, dz)?;

        let mut model = QuadraticConfig::default_for(grid);
        model.delta = ini.f64_or("prior", "delta", model.delta)?;
        model.gamma = ini.f64_or("prior", "gamma", model.gamma)?;
        model.n_modes = ini.usize_or("model", "n_modes", model.n_modes)?;
        model.mode_decay = ini.f64_or("model", "mode_decay", model.mode_decay)?;
        model.weight_max = ini.f64_or("model", "weight_max", model.weight_max)?;
        model.weight_min = ini.f64_or("model", "weight_min", model.weight_min)?;
        model.target_seed = ini.u64_or("model", "target_seed", model.target_seed)?;

        let band = match (
            ini.f64_opt("probe", "pdo.f_min")?,
            ini.f64_opt("probe", "pdo.f_max")?,
            ini.f64_opt("probe", "pdo.c_min")?,
            ini.f64_opt("probe", "pdo.c_max")?,
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => Some((a, b, c, d)),
            (None, None, None, None) => None,
            _ => {
                return Err(CoreError::Config(
                    "pdo band needs all of f_min, f_max, c_min, c_max".into(),
                ))
            }
        };

        let default_probes = default_probe_points(&grid);
        let probe_points = match ini.get("chain", "probe_points") {
            Some(s) => parse_points(s)?,
            None => default_probes,
        };
        for &(ix, iz) in &probe_points {
            grid.checked_idx(ix, iz)?;
        }

        Ok(Self {
            grid,
            model,
            target_file: ini.get("model", "target_file").map(PathBuf::from),
            prior_mean_file: ini.get("prior", "mean_file").map(PathBuf::from),
            psf_points_x: ini.usize_or("probe", "psf.points_x", 6)?,
            psf_points_z: ini.usize_or("probe", "psf.points_z", 6)?,
            psf_radius: ini.usize_opt("probe", "psf.radius")?,
            pdo_n_angles: ini.usize_or("probe", "pdo.n_angles", 8)?,
            pdo_rho0: ini.f64_opt("probe", "pdo.rho0")?,
            pdo_band: band,
            highpass_cutoff_frac: ini.f64_or("probe", "highpass.cutoff_frac", 0.35)?,
            highpass_width_frac: ini.f64_or("probe", "highpass.width_frac", 0.12)?,
            psfplus_basis_rank: ini.usize_opt("probe", "psfplus.basis_rank")?,
            psfplus_sv_threshold: ini.f64_or("probe", "psfplus.sv_threshold", 1e-2)?,
            lowrank_rank: ini.usize_or("lowrank", "rank", 20)?,
            lowrank_oversample: ini.usize_or("lowrank", "oversample", 10)?,
            lowrank_power_iters: ini.usize_or("lowrank", "power_iters", 2)?,
            correction_rank: ini.usize_or("laplace", "correction_rank", 30)?,
            correction_oversample: ini.usize_or("laplace", "correction_oversample", 10)?,
            correction_power_iters: ini.usize_or("laplace", "correction_power_iters", 2)?,
            lbfgs_memory: ini.usize_or("lbfgs", "memory", 10)?,
            lbfgs_max_iters: ini.usize_or("lbfgs", "max_iters", 1500)?,
            lbfgs_tol: ini.f64_or("lbfgs", "tol", 1e-6)?,
            chain_beta: ini.f64_opt("chain", "beta")?,
            chain_n_samples: ini.usize_or("chain", "n_samples", 20_000)?,
            chain_burn_in: ini.usize_or("chain", "burn_in", 2_000)?,
            chain_thin: ini.usize_or("chain", "thin", 10)?,
            probe_points,
            output_dir: PathBuf::from(
                ini.get("output", "dir").unwrap_or("out"),
            ),
            global_seed: ini.u64_or("run", "seed", 1)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ini(&Ini::load(path)?)
    }

    /// Uniformly scales the grid (and mode count stays fixed) for
    /// desk-scale runs: nx, nz divided by `factor`.
    pub fn scale_grid(&mut self, factor: usize) -> Result<()> {
        assert!(factor >= 1);
        let grid = Grid2D::new(
            (self.grid.nx / factor).max(4),
            (self.grid.nz / factor).max(4),
            self.grid.dx,
            self.grid.dz,
        )?;
        self.grid = grid;
        self.model.grid = grid;
        self.probe_points = default_probe_points(&grid);
        Ok(())
    }
}

/// Five mixed-depth probe points spread across the domain.
pub fn default_probe_points(grid: &Grid2D) -> Vec<(usize, usize)> {
    let x = |f: f64| ((grid.nx as f64 * f) as usize).min(grid.nx - 1);
    let z = |f: f64| ((grid.nz as f64 * f) as usize).min(grid.nz - 1);
    vec![
        (x(0.25), z(0.2)),
        (x(0.75), z(0.2)),
        (x(0.5), z(0.45)),
        (x(0.25), z(0.7)),
        (x(0.75), z(0.7)),
    ]
}

/// Stage seed fan-out: SplitMix64 over the global seed xor the FNV-1a hash
/// of the stage label, so any stage is independently reproducible.
pub fn stage_seed(global: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    let mut z = global ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
