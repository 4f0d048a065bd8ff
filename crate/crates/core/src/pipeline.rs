//! End-to-end pipeline stages: build problem -> probe/approximate Hessian ->
//! correct -> invert -> sample -> diagnose -> report. Stages persist their
//! artifacts deterministically, so re-running with unchanged config and seed
//! rewrites byte-identical files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::config::{stage_seed, PipelineConfig};
use crate::error::{CoreError, Result};
use crate::grid::Field;
use crate::io;
use crate::laplace::{build_correction, build_spd_factor, GaussianReference, LaplaceApproximation};
use crate::lowrank::{randomized_gen_eig, LowRankReference};
use crate::mcmc::{autocorrelation, chain_statistics, ess, run_gpcn, run_pcn, tune_beta, Chain, ChainConfig};
use crate::optimize::{minimize, LbfgsConfig, RunRecord};
use crate::probing::{
    build_pdo_weights, build_psf_plus, build_psf_weights, choose_probe_frequencies,
    pdo_probe, pointwise_sqrt_samples, psf_probe, rank_by_threshold, row_singular_values,
    wrap_highpass, FrequencyChoice, HighPassSpec, PdoProbePlan, PsfProbePlan, PsfSet,
    SymbolColumns,
};
use crate::psido::{LinearOperator, LowRankSymbol};
use crate::quadratic::QuadraticProblem;

/// Symbol-probing approximation routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessMethod {
    Psf,
    Pdo,
    PsfPlus,
}

impl HessMethod {
    pub const ALL: [HessMethod; 3] = [HessMethod::Psf, HessMethod::Pdo, HessMethod::PsfPlus];

    pub fn name(&self) -> &'static str {
        match self {
            HessMethod::Psf => "psf",
            HessMethod::Pdo => "pdo",
            HessMethod::PsfPlus => "psfplus",
        }
    }
}

impl fmt::Display for HessMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// L-BFGS initial-map choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    Prior,
    Hessian(HessMethod),
}

impl Preconditioner {
    pub const ALL: [Preconditioner; 5] = [
        Preconditioner::None,
        Preconditioner::Prior,
        Preconditioner::Hessian(HessMethod::Psf),
        Preconditioner::Hessian(HessMethod::Pdo),
        Preconditioner::Hessian(HessMethod::PsfPlus),
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preconditioner::None => "none",
            Preconditioner::Prior => "prior",
            Preconditioner::Hessian(m) => m.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Preconditioner::None,
            "prior" => Preconditioner::Prior,
            "psf" => Preconditioner::Hessian(HessMethod::Psf),
            "pdo" => Preconditioner::Hessian(HessMethod::Pdo),
            "psfplus" => Preconditioner::Hessian(HessMethod::PsfPlus),
            other => {
                return Err(CoreError::Config(format!(
                    "unknown preconditioner {other:?} (none|prior|psf|pdo|psfplus)"
                )))
            }
        })
    }
}

/// Sampler selections for the `sample` stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMethod {
    Pcn,
    GpcnLr,
    Gpcn(HessMethod),
}

impl SampleMethod {
    pub fn name(&self) -> String {
        match self {
            SampleMethod::Pcn => "pcn".into(),
            SampleMethod::GpcnLr => "gpcn_lr".into(),
            SampleMethod::Gpcn(m) => format!("gpcn_{}", m.name()),
        }
    }

    pub fn parse(method: &str, hessian: Option<&str>) -> Result<Self> {
        match method {
            "pcn" => Ok(SampleMethod::Pcn),
            "gpcn" => match hessian.unwrap_or("psfplus") {
                "lr" => Ok(SampleMethod::GpcnLr),
                "psf" => Ok(SampleMethod::Gpcn(HessMethod::Psf)),
                "pdo" => Ok(SampleMethod::Gpcn(HessMethod::Pdo)),
                "psfplus" => Ok(SampleMethod::Gpcn(HessMethod::PsfPlus)),
                other => Err(CoreError::Config(format!(
                    "unknown hessian {other:?} (lr|psf|pdo|psfplus)"
                ))),
            },
            other => Err(CoreError::Config(format!(
                "unknown method {other:?} (pcn|gpcn)"
            ))),
        }
    }
}

pub fn build_problem(cfg: &PipelineConfig) -> Result<QuadraticProblem> {
    let mut model = cfg.model.clone();
    if let Some(path) = &cfg.target_file {
        model.target = Some(io::read_field(path, cfg.grid)?);
    }
    QuadraticProblem::build(&model)
}

/// Default extraction radius: the largest value whose lattice still
/// respects the margin and batch-separation rules (bigger windows truncate
/// the PSF tails less).
pub fn default_psf_radius(cfg: &PipelineConfig) -> usize {
    let cap = (cfg.grid.nx.min(cfg.grid.nz) - 1) / 2;
    for radius in (1..=cap).rev() {
        if PsfProbePlan::regular(&cfg.grid, cfg.psf_points_x, cfg.psf_points_z, radius).is_ok() {
            return radius;
        }
    }
    1
}

pub fn psf_plan(cfg: &PipelineConfig) -> Result<PsfProbePlan> {
    let radius = cfg.psf_radius.unwrap_or_else(|| default_psf_radius(cfg));
    PsfProbePlan::regular(&cfg.grid, cfg.psf_points_x, cfg.psf_points_z, radius)
}

pub fn pdo_plan(cfg: &PipelineConfig, qp: &QuadraticProblem) -> Result<PdoProbePlan> {
    let choice = if let Some((f_min, f_max, c_min, c_max)) = cfg.pdo_band {
        FrequencyChoice::Band {
            f_min,
            f_max,
            c_min,
            c_max,
        }
    } else {
        FrequencyChoice::Explicit {
            rho0: cfg.pdo_rho0.unwrap_or(0.8 * qp.rho_band),
        }
    };
    choose_probe_frequencies(&cfg.grid, choice, cfg.pdo_n_angles)
}

pub fn highpass_spec(cfg: &PipelineConfig, rho0: f64) -> HighPassSpec {
    HighPassSpec::new(
        cfg.highpass_cutoff_frac * rho0,
        cfg.highpass_width_frac * rho0,
    )
}

/// Everything the probing stage produces: plans, raw samples, and weights.
pub struct ProbeArtifacts {
    pub psf_plan: PsfProbePlan,
    pub psf_weights: Vec<Field>,
    pub psf_set: PsfSet,
    pub pdo_plan: PdoProbePlan,
    pub columns: SymbolColumns,
    pub hp: HighPassSpec,
    pub psf_matvecs: usize,
    pub pdo_matvecs: usize,
}

/// Probes the high-passed windowed misfit Hessian with both the PSF and PDO
/// passes.
pub fn run_probes(cfg: &PipelineConfig, qp: &QuadraticProblem) -> Result<ProbeArtifacts> {
    let psf_plan = psf_plan(cfg)?;
    let pdo_plan = pdo_plan(cfg, qp)?;
    let hp = highpass_spec(cfg, pdo_plan.rho0);
    let misfit = qp.windowed_misfit_op();
    let filtered = wrap_highpass(&misfit, hp);
    let psf_set = psf_probe(&filtered, &psf_plan)?;
    let columns = pdo_probe(&filtered, &pdo_plan)?;
    let psf_weights = build_psf_weights(&psf_plan, &cfg.grid);
    let psf_matvecs = psf_plan.batches.len();
    Ok(ProbeArtifacts {
        psf_plan,
        psf_weights,
        psf_set,
        pdo_plan,
        columns,
        hp,
        psf_matvecs,
        pdo_matvecs: 1,
    })
}

fn psfplus_rank(cfg: &PipelineConfig, rows: &DMatrix<Complex64>) -> usize {
    match cfg.psfplus_basis_rank {
        Some(r) => r,
        None => rank_by_threshold(&row_singular_values(rows), cfg.psfplus_sv_threshold),
    }
}

/// Assembles the direct (non-square-root) operator approximation.
pub fn assemble_raw(
    cfg: &PipelineConfig,
    art: &ProbeArtifacts,
    method: HessMethod,
) -> Result<LowRankSymbol> {
    match method {
        HessMethod::Psf => {
            crate::probing::assemble_psf_operator(&art.psf_set, &art.psf_weights)
        }
        HessMethod::Pdo => {
            let weights = build_pdo_weights(&art.pdo_plan, &cfg.grid);
            let (sym, _residual) = crate::probing::assemble_pdo_operator(
                &art.columns,
                &weights,
                &cfg.grid,
            )?;
            Ok(sym)
        }
        HessMethod::PsfPlus => {
            let rank = psfplus_rank(cfg, &art.psf_set.symbol_rows);
            let built = build_psf_plus(
                &cfg.grid,
                &art.psf_set.symbol_rows,
                &art.psf_weights,
                &art.columns.cols,
                &art.pdo_plan.freq_indices,
                rank,
                None,
            )?;
            Ok(built.symbol)
        }
    }
}

/// Assembles the square-root symbol (pointwise sqrt of the samples) used for
/// the SPD factor.
pub fn assemble_sqrt(
    cfg: &PipelineConfig,
    art: &ProbeArtifacts,
    method: HessMethod,
) -> Result<LowRankSymbol> {
    let (sqrt_rows, _) = pointwise_sqrt_samples(&art.psf_set.symbol_rows);
    let sqrt_rows_c = DMatrix::from_fn(sqrt_rows.nrows(), sqrt_rows.ncols(), |i, j| {
        Complex64::new(sqrt_rows[(i, j)], 0.0)
    });
    let (sqrt_cols, _) = pointwise_sqrt_samples(&art.columns.cols);
    let sqrt_cols_c = DMatrix::from_fn(sqrt_cols.nrows(), sqrt_cols.ncols(), |i, j| {
        Complex64::new(sqrt_cols[(i, j)], 0.0)
    });
    match method {
        HessMethod::Psf => {
            let freq: Vec<Vec<Complex64>> = (0..sqrt_rows_c.nrows())
                .map(|k| (0..sqrt_rows_c.ncols()).map(|j| sqrt_rows_c[(k, j)]).collect())
                .collect();
            LowRankSymbol::new(cfg.grid, art.psf_weights.clone(), freq)
        }
        HessMethod::Pdo => {
            let weights = build_pdo_weights(&art.pdo_plan, &cfg.grid);
            let spatial: Vec<Field> = (0..sqrt_cols_c.ncols())
                .map(|k| Field {
                    grid: cfg.grid,
                    values: (0..cfg.grid.n()).map(|i| sqrt_cols[(i, k)]).collect(),
                })
                .collect();
            LowRankSymbol::new(cfg.grid, spatial, weights)
        }
        HessMethod::PsfPlus => {
            let rank = psfplus_rank(cfg, &sqrt_rows_c);
            let built = build_psf_plus(
                &cfg.grid,
                &sqrt_rows_c,
                &art.psf_weights,
                &sqrt_cols_c,
                &art.pdo_plan.freq_indices,
                rank,
                None,
            )?;
            Ok(built.symbol)
        }
    }
}

/// Builds the factored Laplace approximation for one method: square-root
/// symbol -> SPD factor (prior combined in quadrature) -> whitened-residual
/// low-rank correction against the full Hessian.
pub fn build_laplace(
    cfg: &PipelineConfig,
    qp: &QuadraticProblem,
    art: &ProbeArtifacts,
    method: HessMethod,
    m_map: Field,
) -> Result<LaplaceApproximation> {
    let sqrt_sym = assemble_sqrt(cfg, art, method)?;
    let factor = build_spd_factor(&sqrt_sym, &qp.prior, &art.psf_plan)?;
    let h_full = qp.full_hessian_op();
    let (u, d) = build_correction(
        &h_full,
        &factor,
        cfg.correction_rank,
        cfg.correction_oversample,
        cfg.correction_power_iters,
        stage_seed(cfg.global_seed, &format!("correction/{}", method.name())),
    )?;
    Ok(LaplaceApproximation::new(m_map, factor, u, d))
}

/// The gpCN-LR baseline reference: generalized eigenpairs of the true
/// windowed misfit Hessian against the prior.
pub fn build_lowrank_reference(
    cfg: &PipelineConfig,
    qp: &QuadraticProblem,
    m_map: Field,
) -> Result<LowRankReference> {
    let hd = qp.windowed_misfit_op();
    let pairs = randomized_gen_eig(
        &hd,
        &qp.prior,
        cfg.lowrank_rank,
        cfg.lowrank_oversample,
        cfg.lowrank_power_iters,
        stage_seed(cfg.global_seed, "lowrank"),
    )?;
    Ok(LowRankReference {
        center: m_map,
        pairs,
        prior: qp.prior.clone(),
    })
}

/// MAP point: dense exact mean on oracle-sized grids, PSF+-preconditioned
/// L-BFGS otherwise.
pub fn map_point(cfg: &PipelineConfig, qp: &QuadraticProblem, art: &ProbeArtifacts) -> Result<Field> {
    if cfg.grid.n() <= crate::psido::DENSE_LIMIT {
        Ok(qp.exact_posterior()?.mean)
    } else {
        let sqrt_sym = assemble_sqrt(cfg, art, HessMethod::PsfPlus)?;
        let factor = build_spd_factor(&sqrt_sym, &qp.prior, &art.psf_plan)?;
        let h0 = move |v: &Field| {
            let u = factor.inv_factor.apply(v).expect("grid fixed");
            factor.inv_factor.apply_adjoint(&u).expect("grid fixed")
        };
        let lbfgs = LbfgsConfig {
            memory: cfg.lbfgs_memory,
            max_iters: cfg.lbfgs_max_iters,
            grad_reduction_tol: cfg.lbfgs_tol,
            ..Default::default()
        };
        let start = Field::zeros(cfg.grid);
        let (sol, _) = minimize(qp, Some(&h0), &lbfgs, &start, None)?;
        Ok(sol)
    }
}

/// Band-limited random probes for operator-error estimates: white noise
/// pushed through the high-pass filter and the model's information band.
pub fn band_probe(qp: &QuadraticProblem, hp: &HighPassSpec, seed: u64) -> Field {
    use rand::prelude::*;
    let grid = qp.grid;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = Field {
        grid,
        values: (0..grid.n())
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect(),
    };
    let fg = crate::grid::freq_coords(&grid);
    let mut mult = vec![0.0; grid.n()];
    for jz in 0..grid.nz {
        for jx in 0..grid.nx {
            let rho = fg.magnitude(jx, jz);
            mult[grid.idx(jx, jz)] =
                hp.multiplier(rho) * (-(rho / qp.rho_band).powi(4)).exp();
        }
    }
    let f = crate::fft::apply_real_even_multiplier(&noise, &mult);
    let norm = f.norm();
    f.scale(if norm > 0.0 { 1.0 / norm } else { 1.0 })
}

/// Median relative error of the symmetrized symbol apply against the true
/// filtered operator over `n_probes` band-limited probes. A mask restricts
/// the residual norm (for hull-interior measurements); `None` uses the whole
/// domain.
pub fn operator_error_masked(
    qp: &QuadraticProblem,
    art: &ProbeArtifacts,
    sym: &LowRankSymbol,
    n_probes: usize,
    seed: u64,
    mask: Option<&Field>,
) -> Result<f64> {
    let misfit = qp.windowed_misfit_op();
    let filtered = wrap_highpass(&misfit, art.hp);
    let mut errs = Vec::with_capacity(n_probes);
    for i in 0..n_probes {
        let v = band_probe(qp, &art.hp, seed.wrapping_add(i as u64));
        let exact = filtered.apply(&v);
        let approx = sym.apply_symmetric(&v)?;
        let (num, den) = match mask {
            Some(m) => (
                approx.sub(&exact).hadamard(m).norm(),
                exact.hadamard(m).norm(),
            ),
            None => (approx.sub(&exact).norm(), exact.norm()),
        };
        errs.push(num / den.max(1e-300));
    }
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(errs[n_probes / 2])
}

pub fn operator_error(
    qp: &QuadraticProblem,
    art: &ProbeArtifacts,
    sym: &LowRankSymbol,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    operator_error_masked(qp, art, sym, n_probes, seed, None)
}

/// Indicator of the PSF sample lattice's convex hull interior.
pub fn hull_interior_mask(plan: &PsfProbePlan, grid: &crate::grid::Grid2D) -> Field {
    let (x_lo, x_hi) = (plan.nodes_x[0], *plan.nodes_x.last().unwrap());
    let (z_lo, z_hi) = (plan.nodes_z[0], *plan.nodes_z.last().unwrap());
    let mut f = Field::zeros(*grid);
    for iz in z_lo..=z_hi {
        for ix in x_lo..=x_hi {
            f.values[grid.idx(ix, iz)] = 1.0;
        }
    }
    f
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub struct ApproxReport {
    pub errors: Vec<(HessMethod, f64, usize)>,
}

/// `approx` stage: probe, assemble all three approximations (direct and
/// square-root), persist the bundles and an error/budget report.
pub fn cmd_approx(cfg: &PipelineConfig) -> Result<ApproxReport> {
    let out = cfg.output_dir.clone();
    ensure_dir(&out)?;
    let qp = build_problem(cfg)?;
    let art = run_probes(cfg, &qp)?;

    let sym_dir = out.join("symbols");
    ensure_dir(&sym_dir)?;
    for (k, p) in art.psf_set.psfs.iter().enumerate() {
        io::write_field(&sym_dir.join(format!("psf_field_{k}.hpf")), p)?;
    }

    let mut errors = Vec::new();
    let err_seed = stage_seed(cfg.global_seed, "approx/errors");
    for method in HessMethod::ALL {
        let raw = assemble_raw(cfg, &art, method)?;
        let sqrt = assemble_sqrt(cfg, &art, method)?;
        io::save_symbol(&sym_dir, &format!("{}_raw", method.name()), &raw)?;
        io::save_symbol(&sym_dir, &format!("{}_sqrt", method.name()), &sqrt)?;
        let err = operator_error(&qp, &art, &raw, 10, err_seed)?;
        let matvecs = match method {
            HessMethod::Psf => art.psf_matvecs,
            HessMethod::Pdo => art.pdo_matvecs,
            HessMethod::PsfPlus => art.psf_matvecs + art.pdo_matvecs,
        };
        errors.push((method, err, matvecs));
    }

    let mut csv = String::from("method,median_rel_err,matvecs\n");
    for (m, e, c) in &errors {
        csv.push_str(&format!("{m},{e:.6},{c}\n"));
    }
    fs::write(out.join("approx_errors.csv"), csv)?;
    Ok(ApproxReport { errors })
}

pub struct InvertReport {
    pub preconditioner: Preconditioner,
    pub iterations: usize,
    pub converged: bool,
}

/// `invert` stage: L-BFGS with the chosen initial inverse-Hessian map.
pub fn cmd_invert(cfg: &PipelineConfig, precond: Preconditioner) -> Result<InvertReport> {
    let out = cfg.output_dir.clone();
    ensure_dir(&out)?;
    let qp = build_problem(cfg)?;
    let reference = if cfg.grid.n() <= crate::psido::DENSE_LIMIT {
        Some(qp.exact_posterior()?.mean)
    } else {
        None
    };

    let lbfgs = LbfgsConfig {
        memory: cfg.lbfgs_memory,
        max_iters: cfg.lbfgs_max_iters,
        grad_reduction_tol: cfg.lbfgs_tol,
        ..Default::default()
    };
    let start = Field::zeros(cfg.grid);

    let run = |h0: Option<&dyn Fn(&Field) -> Field>| -> Result<(Field, RunRecord)> {
        minimize(&qp, h0, &lbfgs, &start, reference.as_ref())
    };

    let (solution, record) = match precond {
        Preconditioner::None => run(None)?,
        Preconditioner::Prior => {
            let prior = qp.prior.clone();
            let h0 = move |v: &Field| prior.apply_covariance(v).expect("grid fixed");
            run(Some(&h0))?
        }
        Preconditioner::Hessian(method) => {
            let art = run_probes(cfg, &qp)?;
            let sqrt_sym = assemble_sqrt(cfg, &art, method)?;
            let factor = build_spd_factor(&sqrt_sym, &qp.prior, &art.psf_plan)?;
            let h0 = move |v: &Field| {
                let u = factor.inv_factor.apply(v).expect("grid fixed");
                factor.inv_factor.apply_adjoint(&u).expect("grid fixed")
            };
            run(Some(&h0))?
        }
    };

    let name = precond.name();
    let mut csv = String::from("iter,misfit,gradnorm,solerr\n");
    for i in 0..record.objective.len() {
        let solerr = record
            .solution_error
            .get(i)
            .map(|v| format!("{v:.9e}"))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{:.9e},{:.9e},{}\n",
            i, record.misfit[i], record.grad_norm[i], solerr
        ));
    }
    fs::write(out.join(format!("invert_{name}.csv")), csv)?;
    io::write_field(&out.join(format!("invert_{name}_solution.hpf")), &solution)?;
    for (iter, snap) in &record.snapshots {
        io::write_field(&out.join(format!("invert_{name}_iter{iter}.hpf")), snap)?;
    }
    Ok(InvertReport {
        preconditioner: precond,
        iterations: record.iterations,
        converged: record.converged,
    })
}

pub struct SampleReport {
    pub method: SampleMethod,
    pub beta: f64,
    pub acceptance: f64,
    pub ess: Vec<f64>,
}

/// `sample` stage: build the requested reference, tune beta on a pilot when
/// the config leaves it free, run the chain, and persist traces and fields.
pub fn cmd_sample(cfg: &PipelineConfig, method: SampleMethod) -> Result<SampleReport> {
    let out = cfg.output_dir.clone();
    ensure_dir(&out)?;
    let qp = build_problem(cfg)?;
    let art = run_probes(cfg, &qp)?;
    let m_map = map_point(cfg, &qp, &art)?;
    let seed = stage_seed(cfg.global_seed, &format!("chain/{}", method.name()));

    let reference: Option<Box<dyn GaussianReference>> = match method {
        SampleMethod::Pcn => None,
        SampleMethod::GpcnLr => Some(Box::new(build_lowrank_reference(
            cfg,
            &qp,
            m_map.clone(),
        )?)),
        SampleMethod::Gpcn(m) => Some(Box::new(build_laplace(
            cfg,
            &qp,
            &art,
            m,
            m_map.clone(),
        )?)),
    };

    let make_cfg = |beta: f64, n: usize, burn: usize, seed: u64| {
        let mut c = ChainConfig::new(beta, n, burn, seed);
        c.probe_points = cfg.probe_points.clone();
        c.thin = cfg.chain_thin;
        c.start = Some(m_map.clone());
        c
    };

    let run = |beta: f64, n: usize, burn: usize, seed: u64| -> Result<Chain> {
        let c = make_cfg(beta, n, burn, seed);
        match (&reference, method) {
            (None, _) => run_pcn(&qp, &qp.prior, &c),
            (Some(r), _) => run_gpcn(&qp, r.as_ref(), &c),
        }
    };

    let beta = match cfg.chain_beta {
        Some(b) => b,
        None => {
            let pilot_seed = stage_seed(cfg.global_seed, &format!("pilot/{}", method.name()));
            let (b, _acc) = tune_beta(
                |beta| Ok(run(beta, 300, 0, pilot_seed)?.acceptance_rate()),
                0.25,
            )?;
            b
        }
    };

    let chain = run(beta, cfg.chain_n_samples, cfg.chain_burn_in, seed)?;
    let stats = chain_statistics(&chain)?;
    let name = method.name();

    // Unthinned probe traces.
    let mut csv = String::from("step");
    for (ix, iz) in &cfg.probe_points {
        csv.push_str(&format!(",p{ix}_{iz}"));
    }
    csv.push('\n');
    for step in 0..cfg.chain_n_samples {
        csv.push_str(&step.to_string());
        for trace in &chain.probe_traces {
            csv.push_str(&format!(",{:.9e}", trace[step]));
        }
        csv.push('\n');
    }
    fs::write(out.join(format!("sample_{name}_traces.csv")), csv)?;
    io::write_field(&out.join(format!("sample_{name}_mean.hpf")), &stats.mean)?;
    io::write_field(&out.join(format!("sample_{name}_std.hpf")), &stats.std)?;

    let burn = cfg.chain_burn_in;
    let mut ess_values = Vec::new();
    for trace in &chain.probe_traces {
        ess_values.push(ess(&trace[burn..])?);
    }
    let mut summary = format!(
        "method {name}\nbeta {beta}\nacceptance_rate {:.4}\nsamples {}\nburn_in {}\n",
        chain.acceptance_rate(),
        cfg.chain_n_samples,
        burn
    );
    for ((ix, iz), e) in cfg.probe_points.iter().zip(&ess_values) {
        summary.push_str(&format!("ess[{ix},{iz}] {e:.2}\n"));
    }
    fs::write(out.join(format!("sample_{name}_summary.txt")), &summary)?;

    Ok(SampleReport {
        method,
        beta,
        acceptance: chain.acceptance_rate(),
        ess: ess_values,
    })
}

/// `oracle` stage: dense ground-truth artifacts on small grids.
pub fn cmd_oracle(cfg: &PipelineConfig) -> Result<()> {
    let out = cfg.output_dir.clone();
    ensure_dir(&out)?;
    let qp = build_problem(cfg)?;
    let post = qp.exact_posterior()?; // TooLarge guard lives there
    io::write_field(&out.join("oracle_mean.hpf"), &post.mean)?;
    io::write_field(&out.join("oracle_std.hpf"), &post.std_field(cfg.grid))?;

    // Dense generalized eigenvalues of (W H_d W, R).
    let n = cfg.grid.n();
    let hd_op = qp.windowed_misfit_op();
    let hd = crate::psido::dense_materialize(&hd_op, n)?;
    let prior = qp.prior.clone();
    let r_op = crate::psido::FnOperator::new(cfg.grid, move |v| {
        prior.apply_precision(v).expect("grid fixed")
    });
    let r = crate::psido::dense_materialize(&r_op, n)?;
    let chol = r
        .cholesky()
        .ok_or_else(|| CoreError::Format("prior precision not SPD".into()))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| CoreError::Format("prior factor not invertible".into()))?;
    let t = &l_inv * hd * l_inv.transpose();
    let t = (&t + t.transpose()) * 0.5;
    let mut vals: Vec<f64> = nalgebra::SymmetricEigen::new(t)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals.truncate(100.min(n));
    io::write_vector(&out.join("oracle_eigenvalues.hpf"), &vals)?;
    Ok(())
}

/// `diagnose` stage: recompute autocorrelation and ESS summaries from the
/// persisted probe traces.
pub fn cmd_diagnose(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let out = cfg.output_dir.clone();
    let mut written = Vec::new();
    let entries = fs::read_dir(&out)
        .map_err(|_| CoreError::MissingArtifacts(format!("{}", out.display())))?;
    for entry in entries {
        let path = entry?.path();
        let fname = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        let Some(stem) = fname
            .strip_prefix("sample_")
            .and_then(|s| s.strip_suffix("_traces.csv"))
        else {
            continue;
        };
        let traces = read_trace_csv(&path)?;
        let mut text = format!("chain {stem}\n");
        let burn = cfg.chain_burn_in.min(traces.first().map(|t| t.1.len() / 10).unwrap_or(0));
        for (label, trace) in &traces {
            let post = &trace[burn.min(trace.len() - 1)..];
            let e = ess(post)?;
            let rho = autocorrelation(post)?;
            let lag10: f64 = rho.get(10).copied().unwrap_or(0.0);
            text.push_str(&format!("{label}: ess {e:.2} rho10 {lag10:.4}\n"));
        }
        let target = out.join(format!("diagnose_{stem}.txt"));
        fs::write(&target, text)?;
        written.push(target);
    }
    if written.is_empty() {
        return Err(CoreError::MissingArtifacts(
            "no sample_*_traces.csv in the output directory".into(),
        ));
    }
    Ok(written)
}

fn read_trace_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Format("empty trace csv".into()))?;
    let labels: Vec<String> = header.split(',').skip(1).map(|s| s.to_string()).collect();
    let mut traces: Vec<(String, Vec<f64>)> =
        labels.into_iter().map(|l| (l, Vec::new())).collect();
    for line in lines {
        for (slot, value) in traces.iter_mut().zip(line.split(',').skip(1)) {
            slot.1.push(value.parse().map_err(|_| {
                CoreError::Format(format!("bad trace value {value:?} in {}", path.display()))
            })?);
        }
    }
    Ok(traces)
}

/// `report` stage: aggregates persisted stage outputs into summary tables.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let out = cfg.output_dir.clone();
    let mut written = Vec::new();

    // L-BFGS iteration table.
    let mut rows = Vec::new();
    for p in Preconditioner::ALL {
        let path = out.join(format!("invert_{}.csv", p.name()));
        if let Ok(text) = fs::read_to_string(&path) {
            let iters = text.lines().count().saturating_sub(2); // header + iter 0
            rows.push((p.name().to_string(), iters));
        }
    }
    if !rows.is_empty() {
        let mut csv = String::from("preconditioner,iterations\n");
        for (name, iters) in &rows {
            csv.push_str(&format!("{name},{iters}\n"));
        }
        let path = out.join("report_lbfgs.csv");
        fs::write(&path, csv)?;
        written.push(path);
    }

    // ESS table per probe point per sampling method.
    let mut ess_rows = Vec::new();
    for method in [
        "pcn".to_string(),
        "gpcn_lr".to_string(),
        "gpcn_psf".to_string(),
        "gpcn_pdo".to_string(),
        "gpcn_psfplus".to_string(),
    ] {
        let path = out.join(format!("sample_{method}_traces.csv"));
        if !path.exists() {
            continue;
        }
        let traces = read_trace_csv(&path)?;
        let burn = cfg.chain_burn_in;
        let mut cells = Vec::new();
        for (_, trace) in &traces {
            let post = if trace.len() > burn + 100 {
                &trace[burn..]
            } else {
                &trace[..]
            };
            cells.push(format!("{:.2}", ess(post)?));
        }
        ess_rows.push((method, cells));
    }
    if !ess_rows.is_empty() {
        let mut csv = String::from("method");
        for (ix, iz) in &cfg.probe_points {
            csv.push_str(&format!(",x{ix}_{iz}"));
        }
        csv.push('\n');
        for (method, cells) in &ess_rows {
            csv.push_str(&format!("{method},{}\n", cells.join(",")));
        }
        let path = out.join("report_ess.csv");
        fs::write(&path, csv)?;
        written.push(path);
    }

    // Std accuracy table against the oracle.
    let oracle_path = out.join("oracle_std.hpf");
    if oracle_path.exists() {
        let oracle = io::read_field(&oracle_path, cfg.grid)?;
        let mut csv = String::from("method,rel_l2_err,mean_ratio\n");
        let mut any = false;
        for method in ["pcn", "gpcn_lr", "gpcn_psf", "gpcn_pdo", "gpcn_psfplus"] {
            let path = out.join(format!("sample_{method}_std.hpf"));
            if !path.exists() {
                continue;
            }
            let std = io::read_field(&path, cfg.grid)?;
            let err = std.sub(&oracle).norm() / oracle.norm();
            let ratio = std
                .values
                .iter()
                .zip(&oracle.values)
                .map(|(a, b)| a / b)
                .sum::<f64>()
                / cfg.grid.n() as f64;
            csv.push_str(&format!("{method},{err:.6},{ratio:.6}\n"));
            any = true;
        }
        if any {
            let path = out.join("report_std.csv");
            fs::write(&path, csv)?;
            written.push(path);
        }
    }

    if written.is_empty() {
        return Err(CoreError::MissingArtifacts(
            "no stage outputs found to aggregate".into(),
        ));
    }
    Ok(written)
}
