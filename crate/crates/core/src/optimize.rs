//! L-BFGS with a pluggable initial inverse-Hessian map and a strong-Wolfe
//! cubic-interpolation line search. The initial map slot is where the
//! factored Hessian approximations plug in as preconditioners.

use std::collections::VecDeque;

use crate::error::{CoreError, Result};
use crate::grid::Field;
use crate::quadratic::ObjectiveProblem;

#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Terminate when |g_k| <= tol * |g_0|.
    pub grad_reduction_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_line_search_trials: usize,
    /// Record the iterate at these iteration numbers.
    pub snapshot_iters: Vec<usize>,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 1000,
            grad_reduction_tol: 1e-6,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_trials: 40,
            snapshot_iters: Vec::new(),
        }
    }
}

/// Per-iteration convergence history of one run.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub misfit: Vec<f64>,
    pub objective: Vec<f64>,
    pub grad_norm: Vec<f64>,
    /// L2 error against a reference solution, when one was supplied.
    pub solution_error: Vec<f64>,
    pub snapshots: Vec<(usize, Field)>,
    pub iterations: usize,
    pub converged: bool,
}

struct Pair {
    s: Field,
    y: Field,
    rho: f64,
}

/// Two-loop recursion with the supplied initial map h0 (identity when none).
fn two_loop(
    g: &Field,
    history: &VecDeque<Pair>,
    h0: Option<&dyn Fn(&Field) -> Field>,
) -> Field {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let alpha = pair.rho * pair.s.dot(&q);
        q.axpy(-alpha, &pair.y);
        alphas.push(alpha);
    }
    let mut r = match h0 {
        Some(map) => map(&q),
        None => {
            // Standard scaling gamma = s.y / y.y from the most recent pair.
            match history.back() {
                Some(p) => q.scale(p.s.dot(&p.y) / p.y.dot(&p.y)),
                None => q,
            }
        }
    };
    for (pair, alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = pair.rho * pair.y.dot(&r);
        r.axpy(alpha - beta, &pair.s);
    }
    r
}

/// Spot-checks that a candidate initial map is symmetric positive definite
/// on a few random probes; preconditioned runs abort on failure rather than
/// silently degrading.
pub fn spd_spot_check(
    grid: crate::grid::Grid2D,
    map: &dyn Fn(&Field) -> Field,
    seed: u64,
) -> Result<()> {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for _ in 0..5 {
        probes.push(Field {
            grid,
            values: (0..grid.n()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        });
    }
    for (i, u) in probes.iter().enumerate() {
        let hu = map(u);
        let quad = u.dot(&hu);
        if !(quad > 0.0) {
            return Err(CoreError::PreconditionerNotSpd(format!(
                "probe {i}: quadratic form {quad:.3e} not positive"
            )));
        }
        for v in probes.iter().skip(i + 1) {
            let hv = map(v);
            let lhs = hu.dot(v);
            let rhs = u.dot(&hv);
            let scale = lhs.abs().max(rhs.abs()).max(1e-300);
            if (lhs - rhs).abs() / scale > 1e-8 {
                return Err(CoreError::PreconditionerNotSpd(format!(
                    "asymmetry {:.3e} between probes",
                    (lhs - rhs).abs() / scale
                )));
            }
        }
    }
    Ok(())
}

/// Minimizes the problem objective from `start`, recording per-iteration
/// diagnostics. `h0` seeds the two-loop recursion's initial inverse Hessian;
/// `reference` enables the solution-error trace.
pub fn minimize(
    problem: &dyn ObjectiveProblem,
    h0: Option<&dyn Fn(&Field) -> Field>,
    cfg: &LbfgsConfig,
    start: &Field,
    reference: Option<&Field>,
) -> Result<(Field, RunRecord)> {
    assert!(cfg.memory >= 1);
    assert!(0.0 < cfg.wolfe_c1 && cfg.wolfe_c1 < cfg.wolfe_c2 && cfg.wolfe_c2 < 1.0);
    if let Some(map) = h0 {
        spd_spot_check(start.grid, map, 0x5bd5)?;
    }

    let mut record = RunRecord::default();
    let mut m = start.clone();
    let mut f = problem.objective(&m);
    let mut g = problem.gradient(&m);
    let g0_norm = g.norm();
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut reset_used = false;

    let log = |rec: &mut RunRecord, problem: &dyn ObjectiveProblem, m: &Field, f: f64, g: &Field, iter: usize| {
        rec.misfit.push(problem.misfit(m));
        rec.objective.push(f);
        rec.grad_norm.push(g.norm());
        if let Some(r) = reference {
            rec.solution_error.push(m.sub(r).norm());
        }
        if cfg.snapshot_iters.contains(&iter) {
            rec.snapshots.push((iter, m.clone()));
        }
    };
    log(&mut record, problem, &m, f, &g, 0);

    for iter in 0..cfg.max_iters {
        if g.norm() <= cfg.grad_reduction_tol * g0_norm {
            record.converged = true;
            break;
        }
        let mut dir = two_loop(&g, &history, h0).scale(-1.0);
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            // Not a descent direction: drop the memory and retry once.
            if reset_used {
                return Err(CoreError::NonDescentDirection { slope });
            }
            reset_used = true;
            history.clear();
            dir = two_loop(&g, &history, h0).scale(-1.0);
            slope = g.dot(&dir);
            if slope >= 0.0 {
                return Err(CoreError::NonDescentDirection { slope });
            }
        }

        let (step, f_new, g_new) = strong_wolfe(problem, &m, f, &g, &dir, slope, cfg)?;
        let m_new = m.add(&dir.scale(step));
        let s = m_new.sub(&m);
        let y = g_new.sub(&g);
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back(Pair {
                rho: 1.0 / sy,
                s,
                y,
            });
        }
        m = m_new;
        f = f_new;
        g = g_new;
        record.iterations = iter + 1;
        log(&mut record, problem, &m, f, &g, iter + 1);
    }
    if !record.converged && g.norm() <= cfg.grad_reduction_tol * g0_norm {
        record.converged = true;
    }
    Ok((m, record))
}

/// Strong-Wolfe line search (bracket + cubic-interpolation zoom), following
/// the textbook algorithm. Returns (step, f(step), grad(step)).
fn strong_wolfe(
    problem: &dyn ObjectiveProblem,
    m: &Field,
    f0: f64,
    _g0: &Field,
    dir: &Field,
    slope0: f64,
    cfg: &LbfgsConfig,
) -> Result<(f64, f64, Field)> {
    let c1 = cfg.wolfe_c1;
    let c2 = cfg.wolfe_c2;
    let eval = |alpha: f64| -> (f64, Field, f64) {
        let point = m.add(&dir.scale(alpha));
        let f = problem.objective(&point);
        let g = problem.gradient(&point);
        let slope = g.dot(dir);
        (f, g, slope)
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut slope_prev = slope0;
    let mut alpha = 1.0;
    let mut trials = 0;

    // Bracketing phase.
    let (mut lo, mut hi, mut f_lo, mut slope_lo) = loop {
        trials += 1;
        if trials > cfg.max_line_search_trials {
            return Err(CoreError::LineSearchFailed {
                trials: cfg.max_line_search_trials,
            });
        }
        let (f_a, g_a, slope_a) = eval(alpha);
        if f_a > f0 + c1 * alpha * slope0 || (trials > 1 && f_a >= f_prev) {
            break (alpha_prev, alpha, f_prev, slope_prev);
        }
        if slope_a.abs() <= -c2 * slope0 {
            return Ok((alpha, f_a, g_a));
        }
        if slope_a >= 0.0 {
            break (alpha, alpha_prev, f_a, slope_a);
        }
        alpha_prev = alpha;
        f_prev = f_a;
        slope_prev = slope_a;
        alpha *= 2.0;
    };

    // Zoom phase with cubic interpolation.
    loop {
        trials += 1;
        if trials > cfg.max_line_search_trials {
            return Err(CoreError::LineSearchFailed {
                trials: cfg.max_line_search_trials,
            });
        }
        // Interpolated trial point inside the bracket: minimizer of the
        // quadratic through (lo, f_lo, slope_lo) and f(hi), safeguarded to
        // the bracket interior, bisection otherwise.
        let mid = {
            let d = hi - lo;
            let f_hi = f_at(problem, m, dir, hi);
            let denom = 2.0 * (f_hi - f_lo - slope_lo * d);
            let frac = if denom != 0.0 {
                -slope_lo * d / denom
            } else {
                0.5
            };
            if frac.is_finite() && (0.05..=0.95).contains(&frac) {
                lo + frac * d
            } else {
                0.5 * (lo + hi)
            }
        };
        let (f_m, g_m, slope_m) = eval(mid);
        if f_m > f0 + c1 * mid * slope0 || f_m >= f_lo {
            hi = mid;
        } else {
            if slope_m.abs() <= -c2 * slope0 {
                return Ok((mid, f_m, g_m));
            }
            if slope_m * (hi - lo) >= 0.0 {
                hi = lo;
            }
            lo = mid;
            f_lo = f_m;
            slope_lo = slope_m;
        }
        if (hi - lo).abs() < 1e-14 {
            return Err(CoreError::LineSearchFailed { trials });
        }
    }
}

fn f_at(problem: &dyn ObjectiveProblem, m: &Field, dir: &Field, alpha: f64) -> f64 {
    problem.objective(&m.add(&dir.scale(alpha)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid2D;
    use crate::prior::BiharmonicPrior;
    use crate::quadratic::{QuadraticConfig, QuadraticProblem};

    /// Tiny SPD quadratic over the first two grid values; everything else
    /// pinned by an identity block.
    struct ToyQuadratic {
        grid: Grid2D,
        prior: BiharmonicPrior,
        a: [[f64; 2]; 2],
    }

    impl ToyQuadratic {
        fn new() -> Self {
            let grid = Grid2D::new(4, 4, 1.0, 1.0).unwrap();
            Self {
                grid,
                prior: BiharmonicPrior::new(grid, 1.0, 1.0, None).unwrap(),
                a: [[4.0, 1.0], [1.0, 2.0]],
            }
        }
    }

    impl ObjectiveProblem for ToyQuadratic {
        fn grid(&self) -> Grid2D {
            self.grid
        }
        fn objective(&self, m: &Field) -> f64 {
            let (x, y) = (m.values[0], m.values[1]);
            let rest: f64 = m.values[2..].iter().map(|v| v * v).sum();
            0.5 * (self.a[0][0] * x * x + 2.0 * self.a[0][1] * x * y + self.a[1][1] * y * y)
                - 3.0 * x
                - y
                + 0.5 * rest
        }
        fn gradient(&self, m: &Field) -> Field {
            let mut g = Field::zeros(self.grid);
            let (x, y) = (m.values[0], m.values[1]);
            // Area weight is 1, so value-space gradients coincide.
            g.values[0] = self.a[0][0] * x + self.a[0][1] * y - 3.0;
            g.values[1] = self.a[0][1] * x + self.a[1][1] * y - 1.0;
            for i in 2..self.grid.n() {
                g.values[i] = m.values[i];
            }
            g
        }
        fn misfit(&self, m: &Field) -> f64 {
            self.objective(m)
        }
        fn prior(&self) -> &BiharmonicPrior {
            &self.prior
        }
    }

    #[test]
    fn exact_inverse_hessian_converges_in_one_step() {
        let p = ToyQuadratic::new();
        let det = p.a[0][0] * p.a[1][1] - p.a[0][1] * p.a[0][1];
        let inv = [
            [p.a[1][1] / det, -p.a[0][1] / det],
            [-p.a[0][1] / det, p.a[0][0] / det],
        ];
        let h0 = move |v: &Field| {
            let mut out = v.clone();
            out.values[0] = inv[0][0] * v.values[0] + inv[0][1] * v.values[1];
            out.values[1] = inv[1][0] * v.values[0] + inv[1][1] * v.values[1];
            out
        };
        let cfg = LbfgsConfig {
            grad_reduction_tol: 1e-10,
            ..Default::default()
        };
        let start = Field::zeros(p.grid);
        let (sol, rec) = minimize(&p, Some(&h0), &cfg, &start, None).unwrap();
        assert!(rec.iterations <= 1, "took {} iterations", rec.iterations);
        // Solution of the 2x2 system.
        let want_x = (3.0 * p.a[1][1] - p.a[0][1]) / det;
        let want_y = (p.a[0][0] - 3.0 * p.a[0][1]) / det;
        assert!((sol.values[0] - want_x).abs() < 1e-8);
        assert!((sol.values[1] - want_y).abs() < 1e-8);
    }

    #[test]
    fn quadratic_exactness_with_full_memory() {
        // On an SPD quadratic with memory >= n, L-BFGS terminates within
        // n + 1 iterations at tight tolerance.
        let p = ToyQuadratic::new();
        let cfg = LbfgsConfig {
            memory: 20,
            grad_reduction_tol: 1e-10,
            ..Default::default()
        };
        let start = Field::constant(p.grid, 0.5);
        let (_, rec) = minimize(&p, None, &cfg, &start, None).unwrap();
        assert!(rec.converged);
        assert!(
            rec.iterations <= p.grid.n() + 1,
            "took {} iterations",
            rec.iterations
        );
    }

    #[test]
    fn monotone_decrease_and_gradient_reduction() {
        let grid = Grid2D::new(16, 12, 1.0, 1.0).unwrap();
        let qp = QuadraticProblem::build(&QuadraticConfig::default_for(grid)).unwrap();
        let cfg = LbfgsConfig {
            max_iters: 400,
            ..Default::default()
        };
        let start = Field::zeros(grid);
        let (_, rec) = minimize(&qp, None, &cfg, &start, None).unwrap();
        assert!(rec.converged, "no convergence in {} iters", rec.iterations);
        for w in rec.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * w[0].abs(), "objective increased");
        }
        let first = rec.grad_norm[0];
        let last = *rec.grad_norm.last().unwrap();
        assert!(last <= 1e-6 * first);
    }

    #[test]
    fn deterministic_repeat_runs() {
        let grid = Grid2D::new(12, 8, 1.0, 1.0).unwrap();
        let qp = QuadraticProblem::build(&QuadraticConfig::default_for(grid)).unwrap();
        let cfg = LbfgsConfig {
            max_iters: 50,
            ..Default::default()
        };
        let start = Field::zeros(grid);
        let (a, ra) = minimize(&qp, None, &cfg, &start, None).unwrap();
        let (b, rb) = minimize(&qp, None, &cfg, &start, None).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(ra.grad_norm, rb.grad_norm);
    }

    #[test]
    fn converges_to_exact_posterior_mean() {
        let grid = Grid2D::new(24, 24, 1.0, 1.0).unwrap();
        let qp = QuadraticProblem::build(&QuadraticConfig::default_for(grid)).unwrap();
        let post = qp.exact_posterior().unwrap();
        let cfg = LbfgsConfig {
            max_iters: 2000,
            grad_reduction_tol: 1e-7,
            ..Default::default()
        };
        let start = Field::zeros(grid);
        let (sol, rec) = minimize(&qp, None, &cfg, &start, Some(&post.mean)).unwrap();
        assert!(rec.converged);
        let rel = sol.sub(&post.mean).norm() / post.mean.norm();
        assert!(rel < 1e-5, "relative MAP error {rel}");
        // Solution-error trace was recorded and decreases overall.
        let first = rec.solution_error[0];
        let last = *rec.solution_error.last().unwrap();
        assert!(last < 1e-4 * first);
    }

    #[test]
    fn non_spd_preconditioner_rejected() {
        let p = ToyQuadratic::new();
        let bad = |v: &Field| v.scale(-1.0);
        let cfg = LbfgsConfig::default();
        let start = Field::zeros(p.grid);
        match minimize(&p, Some(&bad), &cfg, &start, None) {
            Err(CoreError::PreconditionerNotSpd(_)) => {}
            other => panic!("expected SPD rejection, got {other:?}"),
        }
    }

    #[test]
    fn wolfe_conditions_hold_at_accepted_steps() {
        // Instrumented run on the toy: re-check both strong Wolfe
        // inequalities along the recorded iterates.
        let grid = Grid2D::new(12, 8, 1.0, 1.0).unwrap();
        let qp = QuadraticProblem::build(&QuadraticConfig::default_for(grid)).unwrap();
        // Reconstruct: run a few manual iterations with the internals.
        let cfg = LbfgsConfig::default();
        let m0 = Field::zeros(grid);
        let f0 = qp.objective(&m0);
        let g0 = qp.gradient(&m0);
        let dir = g0.scale(-1.0);
        let slope0 = g0.dot(&dir);
        let (alpha, f1, g1) = strong_wolfe(&qp, &m0, f0, &g0, &dir, slope0, &cfg).unwrap();
        assert!(f1 <= f0 + cfg.wolfe_c1 * alpha * slope0 + 1e-12 * f0.abs());
        assert!(g1.dot(&dir).abs() <= -cfg.wolfe_c2 * slope0);
    }
}
