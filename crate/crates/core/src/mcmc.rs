//! pCN and gpCN samplers with chain diagnostics: probe-point traces,
//! autocorrelation, Geyer initial-positive-sequence ESS, histograms, and
//! pointwise mean/std fields.
//!
//! The gpCN proposal recenters at the MAP and perturbs with Laplace
//! fluctuations; its acceptance uses Delta(m) = Phi(m) - qf(m - m_map),
//! where qf is the exact precision of the proposal's reference Gaussian.
//! When the target equals that reference, Delta is constant and every
//! proposal is accepted - the consistency test for the whole construction.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::error::{CoreError, Result};
use crate::grid::Field;
use crate::laplace::GaussianReference;
use crate::prior::{white_noise, BiharmonicPrior};
use crate::quadratic::ObjectiveProblem;

#[derive(Debug, Clone)]
pub struct ChainConfig {
    /// Step size in (0, 1]; 1 makes pCN propose independent prior draws.
    pub beta: f64,
    pub n_samples: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Probe points whose value traces are recorded unthinned.
    pub probe_points: Vec<(usize, usize)>,
    /// Keep every thin-th state for field statistics.
    pub thin: usize,
    /// Chain start; defaults to the proposal center (MAP or prior mean).
    pub start: Option<Field>,
}

impl ChainConfig {
    pub fn new(beta: f64, n_samples: usize, burn_in: usize, seed: u64) -> Self {
        assert!(beta > 0.0 && beta <= 1.0, "beta must lie in (0, 1]");
        assert!(burn_in < n_samples);
        Self {
            beta,
            n_samples,
            burn_in,
            seed,
            probe_points: Vec::new(),
            thin: 1,
            start: None,
        }
    }
}

/// Stored MCMC output: thinned states, unthinned probe traces, acceptance.
pub struct Chain {
    pub config: ChainConfig,
    /// (step index, state) pairs, every thin-th step.
    pub samples: Vec<(usize, Field)>,
    pub probe_traces: Vec<Vec<f64>>,
    pub accepted: usize,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.config.n_samples as f64
    }

    /// Post-burn-in thinned states.
    pub fn kept_samples(&self) -> impl Iterator<Item = &Field> {
        let burn = self.config.burn_in;
        self.samples
            .iter()
            .filter(move |(i, _)| *i >= burn)
            .map(|(_, f)| f)
    }
}

/// Crank-Nicolson-style kernel around a fixed center. Both samplers accept
/// with probability min(1, exp(S(state) - S(proposal))) for their potential
/// S, which the driver caches per state.
fn run_chain(
    cfg: &ChainConfig,
    start: Field,
    mut propose: impl FnMut(&Field, &mut ChaCha8Rng) -> Field,
    mut potential: impl FnMut(&Field) -> Result<f64>,
) -> Result<Chain> {
    let mut rng = {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(cfg.seed)
    };
    let mut state = start;
    let mut state_potential = potential(&state)?;
    let mut samples = Vec::new();
    let mut probe_traces = vec![Vec::with_capacity(cfg.n_samples); cfg.probe_points.len()];
    let mut accepted = 0;
    for step in 0..cfg.n_samples {
        let proposal = propose(&state, &mut rng);
        let proposal_potential = potential(&proposal)?;
        let ratio = state_potential - proposal_potential;
        let u: f64 = rng.gen_range(0.0..1.0);
        if u.ln() < ratio {
            state = proposal;
            state_potential = proposal_potential;
            accepted += 1;
        }
        for (trace, &(ix, iz)) in probe_traces.iter_mut().zip(&cfg.probe_points) {
            trace.push(state.at(ix, iz));
        }
        if step % cfg.thin == 0 {
            samples.push((step, state.clone()));
        }
    }
    Ok(Chain {
        config: cfg.clone(),
        samples,
        probe_traces,
        accepted,
    })
}

/// gpCN: proposals m' = m_map + sqrt(1-beta^2)(m - m_map) + beta*zeta with
/// zeta a Laplace fluctuation, accepted with probability
/// min(1, exp(Delta(m) - Delta(m'))), Delta(m) = Phi(m) - qf(m - m_map).
pub fn run_gpcn(
    problem: &dyn ObjectiveProblem,
    reference: &dyn GaussianReference,
    cfg: &ChainConfig,
) -> Result<Chain> {
    let m_map = reference.center().clone();
    let center = m_map.clone();
    let contraction = (1.0 - cfg.beta * cfg.beta).max(0.0).sqrt();
    let start = cfg.start.clone().unwrap_or_else(|| m_map.clone());
    run_chain(
        cfg,
        start,
        |state, rng| {
            let zeta = reference.draw_fluctuation(rng);
            let mut prop = center.clone();
            prop.axpy(contraction, &state.sub(&center));
            prop.axpy(cfg.beta, &zeta);
            prop
        },
        |m| {
            let qf = reference.quad_form_centered(&m.sub(&m_map))?;
            Ok(problem.objective(m) - qf)
        },
    )
}

/// pCN: prior-reversible proposals around the prior mean, accepted on the
/// misfit potential alone.
pub fn run_pcn(
    problem: &dyn ObjectiveProblem,
    prior: &BiharmonicPrior,
    cfg: &ChainConfig,
) -> Result<Chain> {
    let contraction = (1.0 - cfg.beta * cfg.beta).max(0.0).sqrt();
    let mean = prior.mean.clone();
    let start = cfg.start.clone().unwrap_or_else(|| mean.clone());
    run_chain(
        cfg,
        start,
        |state, rng| {
            let w = white_noise(prior.grid, rng);
            let zeta = prior
                .apply_power(&w, -0.5)
                .expect("noise lives on the prior grid");
            let mut prop = mean.clone();
            prop.axpy(contraction, &state.sub(&mean));
            prop.axpy(cfg.beta, &zeta);
            prop
        },
        |m| Ok(problem.misfit(m)),
    )
}

/// Normalized autocorrelation of a trace via FFT, rho_0 = 1.
pub fn autocorrelation(trace: &[f64]) -> Result<Vec<f64>> {
    let n = trace.len();
    if n < 100 {
        return Err(CoreError::TraceTooShort { len: n, min: 100 });
    }
    let mean = trace.iter().sum::<f64>() / n as f64;
    let padded = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex64> = (0..padded)
        .map(|i| {
            if i < n {
                Complex64::new(trace[i] - mean, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(padded).process(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(padded).process(&mut buf);
    let var = buf[0].re;
    if var <= 0.0 {
        // Degenerate constant trace.
        let mut rho = vec![0.0; n];
        rho[0] = 1.0;
        return Ok(rho);
    }
    Ok((0..n).map(|k| buf[k].re / var).collect())
}

/// Effective sample size by Geyer's initial positive sequence:
/// ESS = n / (-1 + 2 sum Gamma_m), Gamma_m = rho_2m + rho_2m+1, truncated at
/// the first non-positive pair. Degenerate constant traces count as 1.
pub fn ess(trace: &[f64]) -> Result<f64> {
    let rho = autocorrelation(trace)?;
    let n = trace.len();
    let mean = trace.iter().sum::<f64>() / n as f64;
    let var = trace.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    if var == 0.0 {
        return Ok(1.0);
    }
    let mut tau = -1.0;
    let mut m = 0;
    loop {
        let a = rho.get(2 * m).copied().unwrap_or(0.0);
        let b = rho.get(2 * m + 1).copied().unwrap_or(0.0);
        let gamma = a + b;
        if gamma <= 0.0 || 2 * m + 1 >= n {
            break;
        }
        tau += 2.0 * gamma;
        m += 1;
    }
    let tau = tau.max(1.0 / n as f64);
    Ok((n as f64 / tau).clamp(1.0, n as f64))
}

/// Histogram with Freedman-Diaconis bin widths.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64]) -> Histogram {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let iqr = sorted[(3 * n) / 4] - sorted[n / 4];
    let width = 2.0 * iqr / (n as f64).cbrt();
    let bins = if width > 0.0 && hi > lo {
        (((hi - lo) / width).ceil() as usize).clamp(1, 200)
    } else {
        1
    };
    let bin_w = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / bin_w) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let edges = (0..=bins).map(|i| lo + i as f64 * bin_w).collect();
    Histogram { edges, counts }
}

/// Post-burn-in summary: mean and unbiased std fields, probe histograms.
pub struct ChainStats {
    pub mean: Field,
    pub std: Field,
    pub probe_histograms: Vec<Histogram>,
}

pub fn chain_statistics(chain: &Chain) -> Result<ChainStats> {
    let kept: Vec<&Field> = chain.kept_samples().collect();
    if kept.len() < 100 {
        return Err(CoreError::TraceTooShort {
            len: kept.len(),
            min: 100,
        });
    }
    let grid = kept[0].grid;
    let n = grid.n();
    let count = kept.len() as f64;
    let mut mean = vec![0.0; n];
    for s in &kept {
        for i in 0..n {
            mean[i] += s.values[i];
        }
    }
    for v in &mut mean {
        *v /= count;
    }
    let mut var = vec![0.0; n];
    for s in &kept {
        for i in 0..n {
            let d = s.values[i] - mean[i];
            var[i] += d * d;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / (count - 1.0)).sqrt())
        .collect::<Vec<_>>();

    let burn = chain.config.burn_in;
    let probe_histograms = chain
        .probe_traces
        .iter()
        .map(|t| histogram(&t[burn..]))
        .collect();
    Ok(ChainStats {
        mean: Field { grid, values: mean },
        std: Field { grid, values: std },
        probe_histograms,
    })
}

/// Picks the largest step size whose pilot acceptance stays above the floor,
/// running short pilot chains over a fixed beta ladder. Returns the chosen
/// beta and its pilot acceptance rate.
pub fn tune_beta(
    mut run_pilot: impl FnMut(f64) -> Result<f64>,
    floor: f64,
) -> Result<(f64, f64)> {
    let ladder = [1.0, 0.8, 0.6, 0.4, 0.25, 0.15, 0.08, 0.04, 0.02, 0.01];
    let mut best = (ladder[ladder.len() - 1], 0.0);
    for &beta in &ladder {
        let acc = run_pilot(beta)?;
        if acc >= floor {
            return Ok((beta, acc));
        }
        best = (beta, acc);
    }
    Ok(best)
}
