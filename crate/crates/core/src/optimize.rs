//! Limited-memory BFGS in logit space, the conjugate-residual solver and
//! marginal uncertainty extraction.
//!
//! The optimizer works on `Ψ = logit(Θ)` so every iterate stays inside the
//! unit box. Uncertainty comes from one linear solve `H r = q` per
//! component with `q = e_l`, using Hessian-vector products only.
//!
//! Scaling convention: with the misfit cost `J′` the Hessian is that of
//! `J′ = σ² J`, so the marginal variance is `σ̂² r_l` and the standard
//! deviation `σ̂ sqrt(r_l)`. With the full likelihood the Hessian already
//! carries `1/σ²` and the variance is `r_l` itself.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::adjoint::{gradient, Linearization, Problem};
use crate::error::{Error, Result};
use crate::model::{logistic, to_psi, ClampWarning, StateVector};
use crate::observation::{sigma_hat, CostKind};

/// How the gradient threshold is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ToleranceMode {
    /// `‖g‖∞ ≤ grad_tol · max(1, |J|)`
    #[default]
    Relative,
    /// `‖g‖∞ ≤ grad_tol`
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub tolerance_mode: ToleranceMode,
    /// Report a line-search stall as a termination reason with the best
    /// iterate instead of an error.
    pub stall_is_termination: bool,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-8,
            max_iters: 500,
            armijo_c1: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 50,
            tolerance_mode: ToleranceMode::Relative,
            stall_is_termination: false,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.armijo_c1 > 0.0 && self.armijo_c1 < 1.0) {
            return Err(Error::Invalid(format!("armijo_c1 must lie in (0, 1), got {}", self.armijo_c1)));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Invalid(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::Invalid(format!("grad_tol must be non-negative, got {}", self.grad_tol)));
        }
        if self.memory == 0 {
            return Err(Error::Invalid("LBFGS memory must be at least 1".into()));
        }
        Ok(())
    }

    fn threshold(&self, cost: f64) -> f64 {
        match self.tolerance_mode {
            ToleranceMode::Relative => self.grad_tol * cost.abs().max(1.0),
            ToleranceMode::Absolute => self.grad_tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// Only produced when `stall_is_termination` is set.
    LineSearchStall,
}

/// One row of the optimizer trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub cost: f64,
    /// `‖∂J/∂Ψ‖∞` over the free components.
    pub grad_norm: f64,
    /// Value of the tracked component of `Θ`, if any.
    pub param_estimate: Option<f64>,
}

/// Current iterate handed to an observer after every accepted step.
pub struct Iterate<'a> {
    pub row: TraceRow,
    pub theta: &'a StateVector,
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub theta_hat: StateVector,
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Vec<TraceRow>,
    /// Cost evaluations, each one forward and one backward sweep.
    pub evaluations: usize,
    pub clamp_warning: Option<ClampWarning>,
}

/// Which components move and which one the trace follows.
#[derive(Debug, Clone, Default)]
pub struct MinimizeOptions {
    /// `None` frees every component.
    pub free: Option<Vec<usize>>,
    /// Defaults to the last component when the model has parameters.
    pub track: Option<usize>,
}

struct Evaluation {
    theta: StateVector,
    cost: f64,
    grad: Vec<f64>,
}

struct Objective<'p, 'a> {
    problem: &'p Problem<'a>,
    base: Vec<f64>,
    n_param: usize,
    free: Vec<usize>,
    evaluations: usize,
}

impl Objective<'_, '_> {
    fn theta_of(&self, psi: &[f64]) -> Result<StateVector> {
        let mut theta = self.base.clone();
        for (&i, &p) in self.free.iter().zip(psi) {
            theta[i] = logistic(p);
        }
        StateVector::new(theta, self.n_param)
    }

    /// `Ok(None)` when the forward run leaves the finite range, which the
    /// line search treats as an infinite cost.
    fn eval(&mut self, psi: &[f64]) -> Result<Option<Evaluation>> {
        let theta = self.theta_of(psi)?;
        self.evaluations += 1;
        match gradient(self.problem, &theta) {
            Ok(g) => {
                let grad: Vec<f64> = self.free.iter().map(|&i| g.grad_psi[i]).collect();
                if grad.iter().any(|v| !v.is_finite()) {
                    return Ok(None);
                }
                Ok(Some(Evaluation {
                    theta,
                    cost: g.cost,
                    grad,
                }))
            }
            Err(Error::NonFiniteState { .. } | Error::NonFiniteAdjoint { .. } | Error::NonFiniteCost) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Two-loop recursion: `-H_k g` from the stored curvature pairs.
fn lbfgs_direction(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes the problem cost over every component of `Θ`.
pub fn minimize(problem: &Problem, guess: &StateVector, cfg: &LbfgsConfig) -> Result<MinimizeResult> {
    minimize_with(problem, guess, cfg, &MinimizeOptions::default(), &mut |_| {})
}

/// Minimizes over the components in `free` only; the rest keep their
/// values from `guess`.
pub fn minimize_masked(
    problem: &Problem,
    guess: &StateVector,
    free: &[usize],
    cfg: &LbfgsConfig,
) -> Result<MinimizeResult> {
    let opts = MinimizeOptions {
        free: Some(free.to_vec()),
        track: None,
    };
    minimize_with(problem, guess, cfg, &opts, &mut |_| {})
}

/// Full-control entry point; `observer` sees every trace row.
pub fn minimize_with(
    problem: &Problem,
    guess: &StateVector,
    cfg: &LbfgsConfig,
    opts: &MinimizeOptions,
    observer: &mut dyn FnMut(&Iterate),
) -> Result<MinimizeResult> {
    cfg.validate()?;
    let n = problem.dim();
    if guess.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: guess.len(),
        });
    }
    let free: Vec<usize> = opts.free.clone().unwrap_or_else(|| (0..n).collect());
    if let Some(&i) = free.iter().find(|&&i| i >= n) {
        return Err(Error::Invalid(format!("free index {i} outside state of length {n}")));
    }
    let track = opts.track.or((guess.n_param() > 0).then(|| n - 1));

    let (psi_all, clamp_warning) = {
        let sub = StateVector::new(free.iter().map(|&i| guess[i]).collect(), 0)?;
        to_psi(&sub)
    };
    let mut psi = psi_all.into_vec();
    let mut obj = Objective {
        problem,
        base: guess.to_vec(),
        n_param: guess.n_param(),
        free,
        evaluations: 0,
    };

    let mut cur = obj.eval(&psi)?.ok_or(Error::NonFiniteCost)?;
    let mut trace = Vec::new();
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut record = |iter: usize, ev: &Evaluation, trace: &mut Vec<TraceRow>| {
        let row = TraceRow {
            iter,
            cost: ev.cost,
            grad_norm: inf_norm(&ev.grad),
            param_estimate: track.map(|t| ev.theta[t]),
        };
        trace.push(row);
        observer(&Iterate { row, theta: &ev.theta });
    };
    record(0, &cur, &mut trace);

    let finish = |cur: Evaluation, iterations, termination, trace, evaluations| MinimizeResult {
        grad_norm: inf_norm(&cur.grad),
        cost: cur.cost,
        theta_hat: cur.theta,
        iterations,
        termination,
        trace,
        evaluations,
        clamp_warning,
    };

    for iter in 0..cfg.max_iters {
        if inf_norm(&cur.grad) <= cfg.threshold(cur.cost) {
            let evals = obj.evaluations;
            return Ok(finish(cur, iter, Termination::GradientTolerance, trace, evals));
        }

        let mut step = None;
        let mut last_backtracks = 0;
        // Quasi-Newton direction first, then steepest descent from scratch.
        for attempt in 0..2 {
            if attempt == 1 {
                if pairs.is_empty() {
                    break;
                }
                pairs.clear();
            }
            let mut d = lbfgs_direction(&cur.grad, &pairs);
            let mut slope = dot(&cur.grad, &d);
            if !(slope < 0.0) {
                pairs.clear();
                d = cur.grad.iter().map(|g| -g).collect();
                slope = dot(&cur.grad, &d);
            }
            let mut alpha = if pairs.is_empty() {
                1.0 / inf_norm(&cur.grad).max(1.0)
            } else {
                1.0
            };
            for bt in 0..=cfg.max_backtracks {
                last_backtracks = bt;
                let trial: Vec<f64> = psi.iter().zip(&d).map(|(p, di)| p + alpha * di).collect();
                if trial == psi {
                    break;
                }
                if let Some(ev) = obj.eval(&trial)? {
                    // Strict decrease guards against accepting round-off ties.
                    if ev.cost <= cur.cost + cfg.armijo_c1 * alpha * slope && ev.cost < cur.cost {
                        step = Some((trial, ev));
                        break;
                    }
                }
                alpha *= cfg.backtrack_factor;
            }
            if step.is_some() {
                break;
            }
        }

        let Some((trial, next)) = step else {
            if cfg.stall_is_termination {
                let evals = obj.evaluations;
                return Ok(finish(cur, iter, Termination::LineSearchStall, trace, evals));
            }
            return Err(Error::LineSearchFailure {
                iteration: iter,
                backtracks: last_backtracks,
            });
        };

        let s: Vec<f64> = trial.iter().zip(&psi).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        psi = trial;
        cur = next;
        record(iter + 1, &cur, &mut trace);
    }

    let done = inf_norm(&cur.grad) <= cfg.threshold(cur.cost);
    let termination = if done {
        Termination::GradientTolerance
    } else {
        Termination::MaxIterations
    };
    let evals = obj.evaluations;
    Ok(finish(cur, cfg.max_iters, termination, trace, evals))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrConfig {
    pub rel_tol: f64,
    /// `None` means `10·N`.
    pub max_iters: Option<usize>,
    /// Hard cap applied on top of `max_iters`.
    pub ceiling: usize,
    /// Spend one extra product to report `‖H r − q‖` exactly.
    pub true_residual: bool,
}

impl Default for CrConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            max_iters: None,
            ceiling: 10_000,
            true_residual: true,
        }
    }
}

impl CrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::Invalid(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        Ok(())
    }

    fn iteration_limit(&self, n: usize) -> usize {
        self.max_iters.unwrap_or(10 * n).min(self.ceiling)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrResult {
    pub solution: Vec<f64>,
    /// `‖H r − q‖ / ‖q‖`, exact when `true_residual` is set and recursive
    /// otherwise.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Recursive relative residual after each iteration, starting at 1.
    pub history: Vec<f64>,
}

/// Solves `H r = q` for symmetric `H` given only `apply(v, out) = H v`.
///
/// Exhausting the iteration budget is not an error: the best iterate comes
/// back with `converged = false`.
pub fn conjugate_residual<F>(mut apply: F, q: &[f64], cfg: &CrConfig) -> Result<CrResult>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    cfg.validate()?;
    let n = q.len();
    let q_norm = dot(q, q).sqrt();
    if q_norm == 0.0 {
        return Ok(CrResult {
            solution: vec![0.0; n],
            residual_norm: 0.0,
            iterations: 0,
            converged: true,
            history: vec![0.0],
        });
    }
    let limit = cfg.iteration_limit(n);
    let mut x = vec![0.0; n];
    let mut r = q.to_vec();
    let mut ar = vec![0.0; n];
    apply(&r, &mut ar)?;
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut r_ar = dot(&r, &ar);
    let mut history = vec![1.0];
    let mut best = (1.0, x.clone());
    let mut converged = false;
    let mut iterations = 0;

    while iterations < limit {
        let ap_ap = dot(&ap, &ap);
        if !(ap_ap > 0.0) || r_ar == 0.0 || !r_ar.is_finite() {
            return Err(Error::Breakdown { iteration: iterations });
        }
        let alpha = r_ar / ap_ap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        let rel = dot(&r, &r).sqrt() / q_norm;
        history.push(rel);
        if rel < best.0 {
            best = (rel, x.clone());
        }
        if rel <= cfg.rel_tol {
            converged = true;
            break;
        }
        apply(&r, &mut ar)?;
        let r_ar_new = dot(&r, &ar);
        let beta = r_ar_new / r_ar;
        r_ar = r_ar_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }

    let (mut residual_norm, solution) = best;
    if cfg.true_residual {
        let mut hx = vec![0.0; n];
        apply(&solution, &mut hx)?;
        residual_norm = hx.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / q_norm;
    }
    Ok(CrResult {
        solution,
        residual_norm,
        iterations,
        converged,
        history,
    })
}

/// Which subspace the Hessian is inverted on.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum UncertaintyScope {
    /// Every component of `Θ`.
    #[default]
    Full,
    /// Only these components; the others are held fixed.
    Subset(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyResult {
    pub component_index: usize,
    /// Solution of `H r = e_l` on the chosen scope, in scope order.
    pub r_hat: Vec<f64>,
    /// Marginal variance: `σ̂² r_l` for the misfit cost, `r_l` otherwise.
    pub diag_entry: f64,
    pub sigma_hat: f64,
    /// `sqrt(diag_entry)`; `None` when `r_l ≤ 0`.
    pub std_dev: Option<f64>,
    /// `r_l`.
    pub r_l: f64,
    /// Gradient norm `‖∂J/∂Θ‖∞` at the linearization point.
    pub grad_norm: f64,
    pub solver: CrResult,
}

impl UncertaintyResult {
    /// False when insufficient data make `r_l` non-positive.
    pub fn is_valid(&self) -> bool {
        self.std_dev.is_some()
    }
}

/// `σ̂ sqrt(r_l)` when `r_l > 0`.
pub fn std_from_r(sigma_hat: f64, r_l: f64) -> Option<f64> {
    (r_l > 0.0).then(|| sigma_hat * r_l.sqrt())
}

/// Noise estimate at the linearization point, and the factor `σ̂²` or 1
/// that turns `r_l` into a variance.
fn variance_scale(lin: &Linearization) -> Result<(f64, f64)> {
    let p = lin.problem();
    let s = sigma_hat(lin.trajectory(), p.op, p.obs)?;
    Ok(match p.cost {
        CostKind::Misfit => (s, s * s),
        CostKind::Full | CostKind::ProfiledFull => (s, 1.0),
    })
}

/// Marginal uncertainty of component `l` at a converged optimum.
pub fn uncertainty(
    problem: &Problem,
    theta_hat: &StateVector,
    component: usize,
    cr_cfg: &CrConfig,
) -> Result<UncertaintyResult> {
    let lin = Linearization::new(*problem, theta_hat)?;
    uncertainty_at(&lin, component, &UncertaintyScope::Full, cr_cfg)
}

/// Independent solves for several components at one optimum.
pub fn multi_uncertainty(
    problem: &Problem,
    theta_hat: &StateVector,
    components: &[usize],
    cr_cfg: &CrConfig,
) -> Result<Vec<UncertaintyResult>> {
    if components.is_empty() {
        return Ok(Vec::new());
    }
    let lin = Linearization::new(*problem, theta_hat)?;
    components
        .iter()
        .map(|&l| uncertainty_at(&lin, l, &UncertaintyScope::Full, cr_cfg))
        .collect()
}

/// Uncertainty of component `l` reusing a stored linearization.
pub fn uncertainty_at(
    lin: &Linearization,
    component: usize,
    scope: &UncertaintyScope,
    cr_cfg: &CrConfig,
) -> Result<UncertaintyResult> {
    let n = lin.dim();
    let indices: Vec<usize> = match scope {
        UncertaintyScope::Full => (0..n).collect(),
        UncertaintyScope::Subset(v) => v.clone(),
    };
    if let Some(&i) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Invalid(format!("scope index {i} outside state of length {n}")));
    }
    let pos = indices
        .iter()
        .position(|&i| i == component)
        .ok_or_else(|| Error::Invalid(format!("component {component} is not in the uncertainty scope")))?;

    let mut ws = lin.workspace();
    let mut full_in = vec![0.0; n];
    let mut full_out = vec![0.0; n];
    let apply = |v: &[f64], out: &mut [f64]| -> Result<()> {
        full_in.fill(0.0);
        for (&i, &x) in indices.iter().zip(v) {
            full_in[i] = x;
        }
        lin.apply_into(&mut ws, &full_in, &mut full_out)?;
        for (o, &i) in out.iter_mut().zip(&indices) {
            *o = full_out[i];
        }
        Ok(())
    };
    let mut q = vec![0.0; indices.len()];
    q[pos] = 1.0;
    let solver = conjugate_residual(apply, &q, cr_cfg)?;

    let (sigma_hat, scale) = variance_scale(lin)?;
    let r_l = solver.solution[pos];
    let diag_entry = scale * r_l;
    Ok(UncertaintyResult {
        component_index: component,
        r_hat: solver.solution.clone(),
        diag_entry,
        sigma_hat,
        std_dev: (r_l > 0.0).then(|| diag_entry.sqrt()),
        r_l,
        grad_norm: inf_norm(&lin.gradient().grad_theta),
        solver,
    })
}
