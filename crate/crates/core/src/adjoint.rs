//! First-order adjoint gradient, tangent-linear sweep and second-order
//! adjoint Hessian-vector products.
//!
//! Everything here is the exact transpose (or derivative) of the discrete
//! Euler map `θ_{k+1} = θ_k + dt·F(θ_k)`, so gradients are exact for the
//! discrete cost:
//!
//! ```text
//! λ_K = g_K
//! λ_k = λ_{k+1} + dt·(∂F/∂θ|θ_k)ᵀ λ_{k+1} + g_k          (g_k = 0 off observation steps)
//! ξ_0 = γ,  ξ_{k+1} = ξ_k + dt·(∂F/∂θ|θ_k) ξ_k
//! ζ_k = ζ_{k+1} + dt·[(∂F/∂θ|θ_k)ᵀ ζ_{k+1} + (∂²F/∂θ²|θ_k · ξ_k)ᵀ λ_{k+1}] + (∂²𝒥/∂θ²) ξ_k
//! ```
//!
//! `λ_0` is the gradient `∂J/∂Θ` and `ζ_0` is `H γ`. Observation impulses
//! enter as additive terms at their step index.

use crate::error::{Error, Result};
use crate::integrator::{integrate, StateSource, TimeGrid, Trajectory};
use crate::model::{grad_theta_to_psi, Model, StateVector};
use crate::observation::{
    add_misfit_forcing, add_misfit_hessian, cost_full, cost_misfit, sigma_hat_per_channel, CostKind,
    ObservationOperator, ObservationSeries, Sigma,
};

/// A model, its observations and the time grid they live on.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub model: &'a dyn Model,
    pub op: &'a dyn ObservationOperator,
    pub obs: &'a ObservationSeries,
    pub grid: TimeGrid,
    pub cost: CostKind,
}

impl<'a> Problem<'a> {
    /// Checks dimensions and that `grid` reaches every observation time.
    pub fn new(
        model: &'a dyn Model,
        op: &'a dyn ObservationOperator,
        obs: &'a ObservationSeries,
        grid: TimeGrid,
    ) -> Result<Self> {
        if op.dim() != model.dim() {
            return Err(Error::Dimension {
                expected: model.dim(),
                got: op.dim(),
            });
        }
        if !obs.is_empty() && obs.n_obs() != op.n_obs() {
            return Err(Error::Dimension {
                expected: op.n_obs(),
                got: obs.n_obs(),
            });
        }
        obs.steps(&grid)?;
        Ok(Self {
            model,
            op,
            obs,
            grid,
            cost: CostKind::Misfit,
        })
    }

    pub fn with_cost(mut self, cost: CostKind) -> Self {
        self.cost = cost;
        self
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn forward(&self, theta0: &StateVector) -> Result<Trajectory> {
        integrate(self.model, theta0, self.grid)
    }

    /// Cost of an already integrated trajectory, plus the channel weights
    /// the adjoint should use for it.
    fn cost_and_weights(&self, traj: &Trajectory) -> Result<(f64, Option<Vec<f64>>)> {
        if self.obs.is_empty() {
            return Ok((0.0, None));
        }
        match self.cost {
            CostKind::Misfit => Ok((cost_misfit(traj, self.op, self.obs)?.total, None)),
            CostKind::Full => Ok((cost_full(traj, self.op, self.obs)?.total, self.obs.weights(CostKind::Full))),
            CostKind::ProfiledFull => {
                let sigma = sigma_hat_per_channel(traj, self.op, self.obs)?;
                let profiled = self.obs.clone().with_sigma(Sigma::PerChannel(sigma));
                Ok((cost_full(traj, self.op, &profiled)?.total, profiled.weights(CostKind::Full)))
            }
        }
    }

    pub fn cost(&self, theta0: &StateVector) -> Result<f64> {
        let traj = self.forward(theta0)?;
        let (cost, _) = self.cost_and_weights(&traj)?;
        if !cost.is_finite() {
            return Err(Error::NonFiniteCost);
        }
        Ok(cost)
    }
}

/// Cost with its gradient in both parameterizations.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub cost: f64,
    pub grad_theta: Vec<f64>,
    pub grad_psi: Vec<f64>,
}

/// Stored adjoint states `λ_0 … λ_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointTrajectory {
    dim: usize,
    lambda: Vec<f64>,
}

impl AdjointTrajectory {
    pub fn state(&self, step: usize) -> &[f64] {
        &self.lambda[step * self.dim..(step + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.lambda.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

/// Backward sweep over any state source. Returns `λ_0` and, when asked,
/// every `λ_k`.
fn adjoint_sweep(
    problem: &Problem,
    states: &dyn StateSource,
    weights: Option<&[f64]>,
    store: bool,
) -> Result<(Vec<f64>, Option<AdjointTrajectory>)> {
    let n = problem.dim();
    let grid = states.grid();
    let step_map = problem.obs.step_map(&grid)?;
    let dt = grid.dt();
    let k_last = grid.n_steps();

    let mut theta = vec![0.0; n];
    let mut lambda = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut scratch_obs = vec![0.0; problem.op.n_obs()];
    let mut stored = store.then(|| vec![0.0; n * (k_last + 1)]);

    for k in (0..=k_last).rev() {
        if k < k_last {
            states.load(k, &mut theta);
            problem.model.vjp(&theta, &lambda, &mut next);
            for (l, v) in lambda.iter_mut().zip(&next) {
                *l += dt * v;
            }
        }
        if let Some(s) = step_map[k] {
            if k == k_last {
                states.load(k, &mut theta);
            }
            add_misfit_forcing(problem.op, &theta, problem.obs.value(s), weights, &mut scratch_obs, &mut lambda);
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAdjoint { step: k });
        }
        if let Some(buf) = stored.as_mut() {
            buf[k * n..(k + 1) * n].copy_from_slice(&lambda);
        }
    }
    Ok((lambda, stored.map(|lambda| AdjointTrajectory { dim: n, lambda })))
}

fn finish(cost: f64, theta0: &StateVector, grad_theta: Vec<f64>) -> Result<GradientResult> {
    if !cost.is_finite() {
        return Err(Error::NonFiniteCost);
    }
    let grad_psi = grad_theta_to_psi(theta0, &grad_theta);
    Ok(GradientResult {
        cost,
        grad_theta,
        grad_psi,
    })
}

/// Cost and gradient at `theta0` from one forward and one backward sweep.
pub fn gradient(problem: &Problem, theta0: &StateVector) -> Result<GradientResult> {
    let traj = problem.forward(theta0)?;
    let (cost, weights) = problem.cost_and_weights(&traj)?;
    let (grad, _) = adjoint_sweep(problem, &traj, weights.as_deref(), false)?;
    finish(cost, theta0, grad)
}

/// Like [`gradient`], also returning the forward and adjoint trajectories
/// for reuse by Hessian-vector products.
pub fn gradient_with_trajectories(
    problem: &Problem,
    theta0: &StateVector,
) -> Result<(GradientResult, Trajectory, AdjointTrajectory)> {
    let traj = problem.forward(theta0)?;
    let (cost, weights) = problem.cost_and_weights(&traj)?;
    let (grad, stored) = adjoint_sweep(problem, &traj, weights.as_deref(), true)?;
    let lambda = stored.expect("stored on request");
    Ok((finish(cost, theta0, grad)?, traj, lambda))
}

/// Gradient with the forward states served from checkpoints every
/// `stride` steps instead of full storage.
pub fn gradient_checkpointed(problem: &Problem, theta0: &StateVector, stride: usize) -> Result<GradientResult> {
    use crate::integrator::CheckpointedTrajectory;
    let replay = CheckpointedTrajectory::new(problem.model, theta0, problem.grid, stride)?;
    // The cost needs every observed snapshot; collect them from the replay.
    let mut snapshot = vec![0.0; problem.dim()];
    let steps = problem.obs.steps(&problem.grid)?;
    let mut cost = 0.0;
    let mut sums = vec![0.0; problem.op.n_obs()];
    let mut predicted = vec![0.0; problem.op.n_obs()];
    for (s, &k) in steps.iter().enumerate() {
        replay.load(k, &mut snapshot);
        problem.op.apply(&snapshot, &mut predicted);
        for ((acc, d), p) in sums.iter_mut().zip(problem.obs.value(s)).zip(&predicted) {
            *acc += (d - p).powi(2);
        }
    }
    let n_snap = steps.len() as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let weights = match problem.cost {
        CostKind::Misfit => {
            cost = 0.5 * sums.iter().sum::<f64>();
            None
        }
        CostKind::Full | CostKind::ProfiledFull => {
            let sigma: Vec<f64> = match problem.cost {
                CostKind::Full => (0..sums.len()).map(|c| problem.obs.sigma().of(c)).collect(),
                _ => sums.iter().map(|s| (s / n_snap).sqrt()).collect(),
            };
            for (c, s) in sigma.iter().enumerate() {
                cost += n_snap * 0.5 * (two_pi * s * s).ln() + sums[c] / (2.0 * s * s);
            }
            Some(sigma.iter().map(|s| 1.0 / (s * s)).collect::<Vec<_>>())
        }
    };
    let (grad, _) = adjoint_sweep(problem, &replay, weights.as_deref(), false)?;
    finish(cost, theta0, grad)
}

/// Tangent-linear sweep `ξ_{k+1} = ξ_k + dt·(∂F/∂θ|θ̂_k) ξ_k`, `ξ_0 = γ`.
pub fn tlm_sweep(model: &dyn Model, theta_hat: &Trajectory, gamma: &[f64]) -> Result<Trajectory> {
    let n = model.dim();
    if gamma.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: gamma.len(),
        });
    }
    let mut xi = vec![0.0; n * theta_hat.len()];
    tangent_into(model, theta_hat, gamma, &mut xi, &mut vec![0.0; n])?;
    Ok(Trajectory::from_raw(theta_hat.grid(), n, 0, xi))
}

fn tangent_into(model: &dyn Model, theta_hat: &Trajectory, gamma: &[f64], xi: &mut [f64], scratch: &mut [f64]) -> Result<()> {
    let n = model.dim();
    let dt = theta_hat.grid().dt();
    xi[..n].copy_from_slice(gamma);
    for k in 0..theta_hat.len() - 1 {
        let (head, tail) = xi.split_at_mut((k + 1) * n);
        let cur = &head[k * n..];
        model.jvp(theta_hat.state(k), cur, scratch);
        let next = &mut tail[..n];
        for ((x, &c), &d) in next.iter_mut().zip(cur).zip(scratch.iter()) {
            *x = c + dt * d;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
    }
    Ok(())
}

/// Linearization point for Hessian-vector products: the optimal forward
/// trajectory `θ̂` and adjoint `λ̂`, plus the misfit weights used there.
pub struct Linearization<'a> {
    problem: Problem<'a>,
    theta_hat: Trajectory,
    lambda_hat: AdjointTrajectory,
    weights: Option<Vec<f64>>,
    step_map: Vec<Option<usize>>,
    gradient: GradientResult,
}

/// Scratch buffers for one Hessian-vector product.
pub struct HvpWorkspace {
    xi: Vec<f64>,
    zeta: Vec<f64>,
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
    obs: Vec<f64>,
}

impl<'a> Linearization<'a> {
    /// Runs the forward and adjoint sweeps at `theta_hat` and keeps both.
    pub fn new(problem: Problem<'a>, theta_hat: &StateVector) -> Result<Self> {
        let (gradient, traj, lambda) = gradient_with_trajectories(&problem, theta_hat)?;
        let (_, weights) = problem.cost_and_weights(&traj)?;
        Self::assemble(problem, traj, lambda, weights, gradient)
    }

    /// Reuses a stored forward trajectory and, if available, its adjoint.
    /// Without an adjoint the sweep is recomputed unless `recompute` is off.
    pub fn from_stored(
        problem: Problem<'a>,
        theta_hat: Trajectory,
        lambda_hat: Option<AdjointTrajectory>,
        recompute: bool,
    ) -> Result<Self> {
        let (cost, weights) = problem.cost_and_weights(&theta_hat)?;
        let lambda = match lambda_hat {
            Some(l) => l,
            None if recompute => adjoint_sweep(&problem, &theta_hat, weights.as_deref(), true)?
                .1
                .expect("stored on request"),
            None => return Err(Error::MissingLambda),
        };
        let theta0 = theta_hat.state_vector(0);
        let gradient = finish(cost, &theta0, lambda.state(0).to_vec())?;
        Self::assemble(problem, theta_hat, lambda, weights, gradient)
    }

    fn assemble(
        problem: Problem<'a>,
        theta_hat: Trajectory,
        lambda_hat: AdjointTrajectory,
        weights: Option<Vec<f64>>,
        gradient: GradientResult,
    ) -> Result<Self> {
        let step_map = problem.obs.step_map(&theta_hat.grid())?;
        Ok(Self {
            problem,
            theta_hat,
            lambda_hat,
            weights,
            step_map,
            gradient,
        })
    }

    pub fn dim(&self) -> usize {
        self.problem.dim()
    }

    pub fn problem(&self) -> &Problem<'a> {
        &self.problem
    }

    /// Gradient at the linearization point; a health check for optimality.
    pub fn gradient(&self) -> &GradientResult {
        &self.gradient
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.theta_hat
    }

    pub fn adjoint(&self) -> &AdjointTrajectory {
        &self.lambda_hat
    }

    pub fn workspace(&self) -> HvpWorkspace {
        let n = self.dim();
        HvpWorkspace {
            xi: vec![0.0; n * self.theta_hat.len()],
            zeta: vec![0.0; n],
            buf_a: vec![0.0; n],
            buf_b: vec![0.0; n],
            obs: vec![0.0; self.problem.op.n_obs()],
        }
    }

    /// `out = H γ` with `H = ∂²J/∂Θ²` at the linearization point.
    pub fn apply_into(&self, ws: &mut HvpWorkspace, gamma: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        if gamma.len() != n || out.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: gamma.len().min(out.len()),
            });
        }
        let model = self.problem.model;
        let dt = self.theta_hat.grid().dt();
        tangent_into(model, &self.theta_hat, gamma, &mut ws.xi, &mut ws.buf_a)?;

        let k_last = self.theta_hat.len() - 1;
        let zeta = &mut ws.zeta;
        zeta.fill(0.0);
        for k in (0..=k_last).rev() {
            let theta = self.theta_hat.state(k);
            let xi = &ws.xi[k * n..(k + 1) * n];
            if k < k_last {
                model.vjp(theta, zeta, &mut ws.buf_a);
                model.soa_term(theta, self.lambda_hat.state(k + 1), xi, &mut ws.buf_b);
                for ((z, a), b) in zeta.iter_mut().zip(&ws.buf_a).zip(&ws.buf_b) {
                    *z += dt * (a + b);
                }
            }
            if let Some(s) = self.step_map[k] {
                add_misfit_hessian(
                    self.problem.op,
                    theta,
                    self.problem.obs.value(s),
                    self.weights.as_deref(),
                    xi,
                    &mut ws.obs,
                    zeta,
                );
            }
            if zeta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteAdjoint { step: k });
            }
        }
        out.copy_from_slice(zeta);
        Ok(())
    }

    pub fn apply(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        let mut ws = self.workspace();
        let mut out = vec![0.0; self.dim()];
        self.apply_into(&mut ws, gamma, &mut out)?;
        Ok(out)
    }
}

/// One Hessian-vector product at `theta_hat`. Repeated products should
/// build a [`Linearization`] once instead.
pub fn hvp(problem: &Problem, theta_hat: &StateVector, gamma: &[f64]) -> Result<Vec<f64>> {
    Linearization::new(*problem, theta_hat)?.apply(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::CheckpointedTrajectory;
    use crate::observation::{make_synthetic, observation_times, Projection};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Logistic-type toy: dθ_i/dt = a·θ_i(1 − θ_i) − c·θ_{i+1} (cyclic),
    /// parameter a last.
    struct Toy {
        n: usize,
        c: f64,
    }

    impl Model for Toy {
        fn dim(&self) -> usize {
            self.n + 1
        }
        fn n_param(&self) -> usize {
            1
        }
        fn rhs(&self, t: &[f64], out: &mut [f64]) {
            let a = t[self.n];
            for i in 0..self.n {
                out[i] = a * t[i] * (1.0 - t[i]) - self.c * t[(i + 1) % self.n];
            }
            out[self.n] = 0.0;
        }
        fn jvp(&self, t: &[f64], v: &[f64], out: &mut [f64]) {
            let a = t[self.n];
            for i in 0..self.n {
                out[i] = a * (1.0 - 2.0 * t[i]) * v[i] + t[i] * (1.0 - t[i]) * v[self.n] - self.c * v[(i + 1) % self.n];
            }
            out[self.n] = 0.0;
        }
        fn vjp(&self, t: &[f64], w: &[f64], out: &mut [f64]) {
            let a = t[self.n];
            let mut p = 0.0;
            for i in 0..self.n {
                out[i] = a * (1.0 - 2.0 * t[i]) * w[i] - self.c * w[(i + self.n - 1) % self.n];
                p += t[i] * (1.0 - t[i]) * w[i];
            }
            out[self.n] = p;
        }
        fn soa_term(&self, t: &[f64], l: &[f64], x: &[f64], out: &mut [f64]) {
            let a = t[self.n];
            let mut p = 0.0;
            for i in 0..self.n {
                out[i] = l[i] * (-2.0 * a * x[i] + (1.0 - 2.0 * t[i]) * x[self.n]);
                p += l[i] * (1.0 - 2.0 * t[i]) * x[i];
            }
            out[self.n] = p;
        }
    }

    fn setup(seed: u64) -> (Toy, Projection, ObservationSeries, TimeGrid, StateVector) {
        let toy = Toy { n: 5, c: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..0.8)).chain([1.5]).collect();
        let truth = StateVector::new(truth, 1).unwrap();
        let grid = TimeGrid::new(0.05, 40).unwrap();
        let op = Projection::new(6, vec![0, 1, 3]).unwrap();
        let traj = integrate(&toy, &truth, grid).unwrap();
        let obs = make_synthetic(&traj, &op, &observation_times(0.5, 2.0, 0.25).unwrap(), 0.05, seed).unwrap();
        let guess: Vec<f64> = (0..5).map(|_| rng.random_range(0.2..0.8)).chain([1.2]).collect();
        (toy, op, obs, grid, StateVector::new(guess, 1).unwrap())
    }

    fn fd_gradient(p: &Problem, theta: &StateVector, h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                let mut t = theta.clone();
                t.as_mut_slice()[i] += h;
                let jp = p.cost(&t).unwrap();
                t.as_mut_slice()[i] -= 2.0 * h;
                (jp - p.cost(&t).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences_all_costs() {
        for seed in 0..4 {
            let (toy, op, obs, grid, guess) = setup(seed);
            for kind in [CostKind::Misfit, CostKind::Full, CostKind::ProfiledFull] {
                let p = Problem::new(&toy, &op, &obs, grid).unwrap().with_cost(kind);
                let g = gradient(&p, &guess).unwrap();
                let fd = fd_gradient(&p, &guess, 1e-6);
                for (a, b) in g.grad_theta.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-2), "{kind:?}: {a} vs {b}");
                }
                let psi = grad_theta_to_psi(&guess, &g.grad_theta);
                assert_eq!(psi, g.grad_psi);
            }
        }
    }

    #[test]
    fn empty_observations_give_zero_gradient() {
        let (toy, op, _, grid, guess) = setup(0);
        let obs = ObservationSeries::empty(1.0);
        let p = Problem::new(&toy, &op, &obs, grid).unwrap();
        let g = gradient(&p, &guess).unwrap();
        assert_eq!(g.cost, 0.0);
        assert!(g.grad_theta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_invariant_to_final_time() {
        let (toy, op, obs, _, guess) = setup(1);
        let grid = obs.minimal_grid(0.05).unwrap();
        let a = gradient(&Problem::new(&toy, &op, &obs, grid).unwrap(), &guess).unwrap();
        let b = gradient(&Problem::new(&toy, &op, &obs, grid.extended(10)).unwrap(), &guess).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpointed_gradient_is_bit_identical() {
        let (toy, op, obs, grid, guess) = setup(2);
        for kind in [CostKind::Misfit, CostKind::Full] {
            let p = Problem::new(&toy, &op, &obs, grid).unwrap().with_cost(kind);
            let full = gradient(&p, &guess).unwrap();
            for stride in [1, 3, 16] {
                let ck = gradient_checkpointed(&p, &guess, stride).unwrap();
                assert_eq!(full.grad_theta, ck.grad_theta);
                assert!((full.cost - ck.cost).abs() <= 1e-12 * full.cost.abs());
            }
        }
    }

    #[test]
    fn step_level_transpose() {
        let toy = Toy { n: 5, c: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dt = 0.05;
        for _ in 0..20 {
            let theta: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut jv = vec![0.0; 6];
            let mut jw = vec![0.0; 6];
            toy.jvp(&theta, &v, &mut jv);
            toy.vjp(&theta, &w, &mut jw);
            let lhs: f64 = w.iter().zip(v.iter().zip(&jv)).map(|(w, (v, j))| w * (v + dt * j)).sum();
            let rhs: f64 = v.iter().zip(w.iter().zip(&jw)).map(|(v, (w, j))| v * (w + dt * j)).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn tlm_is_linear_and_matches_finite_differences() {
        let (toy, _, _, grid, guess) = setup(4);
        let traj = integrate(&toy, &guess, grid).unwrap();
        let g1 = vec![0.1, -0.2, 0.05, 0.3, 0.0, 0.4];
        let g2 = vec![-0.3, 0.1, 0.2, 0.0, 0.1, -0.2];
        let (a, b) = (1.7, -0.6);
        let combo: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        let t1 = tlm_sweep(&toy, &traj, &g1).unwrap();
        let t2 = tlm_sweep(&toy, &traj, &g2).unwrap();
        let tc = tlm_sweep(&toy, &traj, &combo).unwrap();
        for k in 0..traj.len() {
            for i in 0..6 {
                let lin = a * t1.state(k)[i] + b * t2.state(k)[i];
                assert!((tc.state(k)[i] - lin).abs() < 1e-12);
            }
            assert_eq!(t1.state(k)[5], g1[5]);
        }
        let eps = 1e-5;
        let shift = |s: f64| {
            let v: Vec<f64> = guess.iter().zip(&g1).map(|(t, g)| t + s * g).collect();
            integrate(&toy, &StateVector::new(v, 1).unwrap(), grid).unwrap()
        };
        let (p, m) = (shift(eps), shift(-eps));
        let k = traj.len() - 1;
        let fd: Vec<f64> = p.state(k).iter().zip(m.state(k)).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = fd.iter().zip(t1.state(k)).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) / norm(t1.state(k)) < 1e-5);
    }

    #[test]
    fn hvp_symmetric_and_matches_gradient_differences() {
        for seed in 0..3 {
            let (toy, op, obs, grid, guess) = setup(seed);
            for kind in [CostKind::Misfit, CostKind::Full] {
                let p = Problem::new(&toy, &op, &obs, grid).unwrap().with_cost(kind);
                let lin = Linearization::new(p, &guess).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let g1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g2: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let h1 = lin.apply(&g1).unwrap();
                let h2 = lin.apply(&g2).unwrap();
                let a: f64 = g2.iter().zip(&h1).map(|(x, y)| x * y).sum();
                let b: f64 = g1.iter().zip(&h2).map(|(x, y)| x * y).sum();
                assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()));

                let eps = 1e-5;
                let at = |s: f64| {
                    let v: Vec<f64> = guess.iter().zip(&g1).map(|(t, g)| t + s * g).collect();
                    gradient(&p, &StateVector::new(v, 1).unwrap()).unwrap().grad_theta
                };
                let (gp, gm) = (at(eps), at(-eps));
                let diff: f64 = gp
                    .iter()
                    .zip(&gm)
                    .zip(&h1)
                    .map(|((p, m), h)| ((p - m) / (2.0 * eps) - h).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let norm = h1.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(diff / norm < 1e-5, "{kind:?} {}", diff / norm);
            }
        }
    }

    #[test]
    fn hvp_of_zero_is_zero() {
        let (toy, op, obs, grid, guess) = setup(0);
        let p = Problem::new(&toy, &op, &obs, grid).unwrap();
        assert!(hvp(&p, &guess, &[0.0; 6]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stored_linearization_reuse() {
        let (toy, op, obs, grid, guess) = setup(5);
        let p = Problem::new(&toy, &op, &obs, grid).unwrap();
        let fresh = Linearization::new(p, &guess).unwrap();
        let traj = integrate(&toy, &guess, grid).unwrap();
        assert!(matches!(
            Linearization::from_stored(p, traj.clone(), None, false),
            Err(Error::MissingLambda)
        ));
        let recomputed = Linearization::from_stored(p, traj.clone(), None, true).unwrap();
        let reused = Linearization::from_stored(p, traj, Some(fresh.adjoint().clone()), false).unwrap();
        let gamma = [0.3, 0.1, -0.2, 0.0, 0.5, 1.0];
        assert_eq!(fresh.apply(&gamma).unwrap(), recomputed.apply(&gamma).unwrap());
        assert_eq!(fresh.apply(&gamma).unwrap(), reused.apply(&gamma).unwrap());
        assert_eq!(fresh.gradient().grad_theta, recomputed.gradient().grad_theta);
    }

    #[test]
    fn checkpoint_source_feeds_sweep() {
        let (toy, op, obs, grid, guess) = setup(6);
        let p = Problem::new(&toy, &op, &obs, grid).unwrap();
        let replay = CheckpointedTrajectory::new(&toy, &guess, grid, 7).unwrap();
        let (a, _) = adjoint_sweep(&p, &replay, None, false).unwrap();
        assert_eq!(a, gradient(&p, &guess).unwrap().grad_theta);
    }
}
