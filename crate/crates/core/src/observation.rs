//! Observation model, synthetic data, the misfit costs and the closed-form
//! noise-scale estimate.
//!
//! Two costs are supported. The full negative log-likelihood
//!
//! ```text
//! J  = Σ_s Σ_k [ log(2π σ_k²)/2 + (D_k(t_s) − h_k(θ(t_s)))² / (2σ_k²) ]
//! ```
//!
//! and the unit-weight misfit `J′ = ½ Σ_s Σ_k (D_k − h_k)²`, which has the
//! same minimizer whenever σ is shared and fixed.
//!
//! Synthetic noise is drawn from `ChaCha8Rng::seed_from_u64(seed)` through
//! `rand_distr::StandardNormal`, time-major, then by observed component, and
//! scaled by σ. That mapping is part of the file-level reproducibility
//! contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::integrator::{TimeGrid, Trajectory};

/// Maps a normalized state onto the quantities that are observed.
pub trait ObservationOperator: Sync {
    /// State length `N` the operator acts on.
    fn dim(&self) -> usize;

    /// Observation length `K`.
    fn n_obs(&self) -> usize;

    fn apply(&self, theta: &[f64], out: &mut [f64]);

    /// `out += h′(θ)ᵀ w`
    fn add_adjoint(&self, theta: &[f64], w: &[f64], out: &mut [f64]);

    /// `out = h′(θ) v`
    fn linearized(&self, theta: &[f64], v: &[f64], out: &mut [f64]);

    /// `out += Σ_k w_k ∂²h_k/∂θ² · ξ`. Linear operators keep the default.
    fn add_curvature(&self, _theta: &[f64], _w: &[f64], _xi: &[f64], _out: &mut [f64]) {}
}

/// Observes a fixed subset of state components directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Projection {
    dim: usize,
    indices: Vec<usize>,
}

impl Projection {
    pub fn new(dim: usize, indices: Vec<usize>) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::Invalid(format!("observed index {i} outside state of length {dim}")));
        }
        Ok(Self { dim, indices })
    }

    /// Observes the first `k` components; for the phase-field model this is
    /// the whole field block.
    pub fn leading(dim: usize, k: usize) -> Result<Self> {
        Self::new(dim, (0..k).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl ObservationOperator for Projection {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_obs(&self) -> usize {
        self.indices.len()
    }

    fn apply(&self, theta: &[f64], out: &mut [f64]) {
        for (o, &i) in out.iter_mut().zip(&self.indices) {
            *o = theta[i];
        }
    }

    fn add_adjoint(&self, _theta: &[f64], w: &[f64], out: &mut [f64]) {
        for (&wk, &i) in w.iter().zip(&self.indices) {
            out[i] += wk;
        }
    }

    fn linearized(&self, _theta: &[f64], v: &[f64], out: &mut [f64]) {
        for (o, &i) in out.iter_mut().zip(&self.indices) {
            *o = v[i];
        }
    }
}

/// Observation noise scale.
#[derive(Debug, Clone, PartialEq)]
pub enum Sigma {
    Shared(f64),
    PerChannel(Vec<f64>),
}

impl Sigma {
    pub fn of(&self, channel: usize) -> f64 {
        match self {
            Sigma::Shared(s) => *s,
            Sigma::PerChannel(v) => v[channel],
        }
    }
}

/// Which cost the adjoint machinery differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostKind {
    /// `J′`, unit weights, σ profiled out.
    #[default]
    Misfit,
    /// `J` with the series' σ held fixed.
    Full,
    /// `J` with per-channel σ re-estimated from the current trajectory
    /// before every gradient evaluation.
    ProfiledFull,
}

/// Noisy snapshots `D(t_s)` at strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    sigma: Sigma,
}

impl ObservationSeries {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>, sigma: Sigma) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Dimension {
                expected: times.len(),
                got: values.len(),
            });
        }
        if let Some(&t0) = times.first() {
            if !(t0 > 0.0) {
                return Err(Error::Invalid(format!("first observation time must be positive, got {t0}")));
            }
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("observation times must be strictly increasing".into()));
        }
        let k = values.first().map_or(0, Vec::len);
        for v in &values {
            if v.len() != k {
                return Err(Error::Dimension {
                    expected: k,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid("observation values must be finite".into()));
            }
        }
        match &sigma {
            Sigma::Shared(s) if !(*s >= 0.0) => {
                return Err(Error::Invalid(format!("sigma must be non-negative, got {s}")));
            }
            Sigma::PerChannel(v) if v.len() != k && !values.is_empty() => {
                return Err(Error::Dimension {
                    expected: k,
                    got: v.len(),
                });
            }
            Sigma::PerChannel(v) if v.iter().any(|s| !(*s >= 0.0)) => {
                return Err(Error::Invalid("per-channel sigma must be non-negative".into()));
            }
            _ => {}
        }
        Ok(Self { times, values, sigma })
    }

    /// Empty series; its gradient is identically zero.
    pub fn empty(sigma: f64) -> Self {
        Self {
            times: Vec::new(),
            values: Vec::new(),
            sigma: Sigma::Shared(sigma),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value(&self, s: usize) -> &[f64] {
        &self.values[s]
    }

    pub fn sigma(&self) -> &Sigma {
        &self.sigma
    }

    pub fn with_sigma(mut self, sigma: Sigma) -> Self {
        self.sigma = sigma;
        self
    }

    /// Number of snapshots `n`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Observation length `K`.
    pub fn n_obs(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Step index of every snapshot on `grid`.
    pub fn steps(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        self.times
            .iter()
            .map(|&t| {
                let k = grid.step_of(t)?;
                if k > grid.n_steps() {
                    return Err(Error::TimeOutOfRange { time: t, t_f: grid.t_f() });
                }
                Ok(k)
            })
            .collect()
    }

    /// `obs_at_step[k] = Some(s)` when snapshot `s` is taken at step `k`.
    pub fn step_map(&self, grid: &TimeGrid) -> Result<Vec<Option<usize>>> {
        let mut map = vec![None; grid.n_steps() + 1];
        for (s, k) in self.steps(grid)?.into_iter().enumerate() {
            map[k] = Some(s);
        }
        Ok(map)
    }

    /// Grid ending at the last observation time.
    pub fn minimal_grid(&self, dt: f64) -> Result<TimeGrid> {
        TimeGrid::covering(dt, self.last_time().unwrap_or(0.0))
    }

    /// Per-channel weights of the selected cost, `None` for unit weights.
    pub(crate) fn weights(&self, kind: CostKind) -> Option<Vec<f64>> {
        match kind {
            CostKind::Misfit => None,
            CostKind::Full | CostKind::ProfiledFull => {
                Some((0..self.n_obs()).map(|k| 1.0 / self.sigma.of(k).powi(2)).collect())
            }
        }
    }
}

/// Evenly spaced observation times `t_min, t_min + dT, …` up to `t_max`
/// (inclusive, to a relative `1e-9`).
pub fn observation_times(t_min: f64, t_max: f64, interval: f64) -> Result<Vec<f64>> {
    if !(interval > 0.0) || !(t_min > 0.0) || !(t_max >= t_min) {
        return Err(Error::Invalid(format!(
            "need 0 < T_min <= T_max and dT > 0, got T_min={t_min}, T_max={t_max}, dT={interval}"
        )));
    }
    let n = ((t_max - t_min) / interval + 1e-9).floor() as usize;
    Ok((0..=n).map(|s| t_min + s as f64 * interval).collect())
}

/// Per-snapshot misfit terms and their total.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBreakdown {
    pub total: f64,
    pub per_time: Vec<f64>,
    pub includes_log_term: bool,
}

fn check_operator(traj: &Trajectory, op: &dyn ObservationOperator, obs: &ObservationSeries) -> Result<()> {
    if op.dim() != traj.dim() {
        return Err(Error::Dimension {
            expected: traj.dim(),
            got: op.dim(),
        });
    }
    if !obs.is_empty() && op.n_obs() != obs.n_obs() {
        return Err(Error::Dimension {
            expected: op.n_obs(),
            got: obs.n_obs(),
        });
    }
    Ok(())
}

fn snapshot_steps(traj: &Trajectory, obs: &ObservationSeries) -> Result<Vec<usize>> {
    let grid = traj.grid();
    obs.times
        .iter()
        .map(|&time| {
            let step = grid.step_of(time)?;
            if step >= traj.len() {
                return Err(Error::MissingSnapshot { step, time });
            }
            Ok(step)
        })
        .collect()
}

/// Squared residuals per snapshot and channel, visited in order.
fn for_each_residual(
    traj: &Trajectory,
    op: &dyn ObservationOperator,
    obs: &ObservationSeries,
    mut f: impl FnMut(usize, &[f64], &[f64]),
) -> Result<()> {
    check_operator(traj, op, obs)?;
    let steps = snapshot_steps(traj, obs)?;
    let mut predicted = vec![0.0; op.n_obs()];
    for (s, &step) in steps.iter().enumerate() {
        op.apply(traj.state(step), &mut predicted);
        f(s, &obs.values[s], &predicted);
    }
    Ok(())
}

/// Full negative log-likelihood `J` with the series' σ.
pub fn cost_full(traj: &Trajectory, op: &dyn ObservationOperator, obs: &ObservationSeries) -> Result<CostBreakdown> {
    let k = obs.n_obs();
    let log_terms: Vec<f64> = (0..k)
        .map(|c| 0.5 * (2.0 * std::f64::consts::PI * obs.sigma.of(c).powi(2)).ln())
        .collect();
    let inv_var: Vec<f64> = (0..k).map(|c| 0.5 / obs.sigma.of(c).powi(2)).collect();
    let mut per_time = Vec::with_capacity(obs.len());
    for_each_residual(traj, op, obs, |_, data, pred| {
        let term: f64 = data
            .iter()
            .zip(pred)
            .enumerate()
            .map(|(c, (d, p))| log_terms[c] + inv_var[c] * (d - p).powi(2))
            .sum();
        per_time.push(term);
    })?;
    Ok(CostBreakdown {
        total: per_time.iter().sum(),
        per_time,
        includes_log_term: true,
    })
}

/// Unit-weight misfit `J′`.
pub fn cost_misfit(traj: &Trajectory, op: &dyn ObservationOperator, obs: &ObservationSeries) -> Result<CostBreakdown> {
    let mut per_time = Vec::with_capacity(obs.len());
    for_each_residual(traj, op, obs, |_, data, pred| {
        per_time.push(0.5 * data.iter().zip(pred).map(|(d, p)| (d - p).powi(2)).sum::<f64>());
    })?;
    Ok(CostBreakdown {
        total: per_time.iter().sum(),
        per_time,
        includes_log_term: false,
    })
}

/// Shared-σ estimate `sqrt(Σ_s Σ_k (D − h)² / (nK))`.
pub fn sigma_hat(traj: &Trajectory, op: &dyn ObservationOperator, obs: &ObservationSeries) -> Result<f64> {
    if obs.is_empty() || obs.n_obs() == 0 {
        return Err(Error::EmptyObservations);
    }
    let mut sum = 0.0;
    for_each_residual(traj, op, obs, |_, data, pred| {
        sum += data.iter().zip(pred).map(|(d, p)| (d - p).powi(2)).sum::<f64>();
    })?;
    Ok((sum / (obs.len() * obs.n_obs()) as f64).sqrt())
}

/// Per-channel estimate `σ_k = sqrt(Σ_s (D_k − h_k)² / n)`.
pub fn sigma_hat_per_channel(
    traj: &Trajectory,
    op: &dyn ObservationOperator,
    obs: &ObservationSeries,
) -> Result<Vec<f64>> {
    if obs.is_empty() || obs.n_obs() == 0 {
        return Err(Error::EmptyObservations);
    }
    let mut sums = vec![0.0; obs.n_obs()];
    for_each_residual(traj, op, obs, |_, data, pred| {
        for ((s, d), p) in sums.iter_mut().zip(data).zip(pred) {
            *s += (d - p).powi(2);
        }
    })?;
    let n = obs.len() as f64;
    Ok(sums.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Gradient of one snapshot's misfit with respect to `θ(t_s)`:
/// `h′ᵀ W (h(θ) − D)`, with `W` the identity for `J′` or `diag(1/σ_k²)`
/// for `J`. Adding it to the adjoint at the observation step is the
/// discrete counterpart of the Dirac forcing.
pub fn misfit_forcing(
    op: &dyn ObservationOperator,
    theta: &[f64],
    data: &[f64],
    weights: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; op.dim()];
    let mut scratch = vec![0.0; op.n_obs()];
    add_misfit_forcing(op, theta, data, weights, &mut scratch, &mut out);
    out
}

pub(crate) fn add_misfit_forcing(
    op: &dyn ObservationOperator,
    theta: &[f64],
    data: &[f64],
    weights: Option<&[f64]>,
    scratch: &mut [f64],
    out: &mut [f64],
) {
    op.apply(theta, scratch);
    for (k, (r, d)) in scratch.iter_mut().zip(data).enumerate() {
        *r -= d;
        if let Some(w) = weights {
            *r *= w[k];
        }
    }
    op.add_adjoint(theta, scratch, out);
}

/// Forcing for snapshot step `step` given the step-to-snapshot map;
/// errors when `step` carries no observation.
pub fn misfit_forcing_at(
    op: &dyn ObservationOperator,
    obs: &ObservationSeries,
    step_map: &[Option<usize>],
    step: usize,
    theta: &[f64],
    kind: CostKind,
) -> Result<Vec<f64>> {
    let s = step_map
        .get(step)
        .copied()
        .flatten()
        .ok_or(Error::NotAnObservationTime { step })?;
    let weights = obs.weights(kind);
    Ok(misfit_forcing(op, theta, obs.value(s), weights.as_deref()))
}

/// `out += (∂²𝒥/∂θ²) ξ` for one snapshot: `h′ᵀ W h′ ξ` plus the operator's
/// curvature term weighted by the residual.
pub(crate) fn add_misfit_hessian(
    op: &dyn ObservationOperator,
    theta: &[f64],
    data: &[f64],
    weights: Option<&[f64]>,
    xi: &[f64],
    scratch: &mut [f64],
    out: &mut [f64],
) {
    op.linearized(theta, xi, scratch);
    if let Some(w) = weights {
        for (s, wk) in scratch.iter_mut().zip(w) {
            *s *= wk;
        }
    }
    op.add_adjoint(theta, scratch, out);
    op.apply(theta, scratch);
    for (k, (r, d)) in scratch.iter_mut().zip(data).enumerate() {
        *r -= d;
        if let Some(w) = weights {
            *r *= w[k];
        }
    }
    op.add_curvature(theta, scratch, xi, out);
}

/// Samples `D_k(t_s) = h_k(θ(t_s)) + σ ω`, `ω ~ N(0, 1)`.
pub fn make_synthetic(
    traj: &Trajectory,
    op: &dyn ObservationOperator,
    times: &[f64],
    sigma: f64,
    seed: u64,
) -> Result<ObservationSeries> {
    if !(sigma >= 0.0) {
        return Err(Error::Invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if op.dim() != traj.dim() {
        return Err(Error::Dimension {
            expected: traj.dim(),
            got: op.dim(),
        });
    }
    let grid = traj.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(times.len());
    for &time in times {
        if !(time >= 0.0) || time > grid.t_f() * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::TimeOutOfRange { time, t_f: grid.t_f() });
        }
        let step = grid.step_of(time)?;
        if step >= traj.len() {
            return Err(Error::TimeOutOfRange { time, t_f: grid.t_f() });
        }
        let mut snapshot = vec![0.0; op.n_obs()];
        op.apply(traj.state(step), &mut snapshot);
        if sigma > 0.0 {
            for v in &mut snapshot {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
        values.push(snapshot);
    }
    ObservationSeries::new(times.to_vec(), values, Sigma::Shared(sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::integrate;
    use crate::model::{Model, StateVector};
    use rand::Rng;

    /// F ≡ 0: every snapshot equals the initial state.
    struct Frozen(usize);

    impl Model for Frozen {
        fn dim(&self) -> usize {
            self.0
        }
        fn n_param(&self) -> usize {
            0
        }
        fn rhs(&self, _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn jvp(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn vjp(&self, _: &[f64], _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
        fn soa_term(&self, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    /// Non-trivial dynamics so snapshots differ: dθ_i/dt = −(i+1)·0.1·θ_i.
    struct Relax(usize);

    impl Model for Relax {
        fn dim(&self) -> usize {
            self.0
        }
        fn n_param(&self) -> usize {
            0
        }
        fn rhs(&self, t: &[f64], out: &mut [f64]) {
            for (i, (o, x)) in out.iter_mut().zip(t).enumerate() {
                *o = -0.1 * (i + 1) as f64 * x;
            }
        }
        fn jvp(&self, _: &[f64], v: &[f64], out: &mut [f64]) {
            self.rhs(v, out)
        }
        fn vjp(&self, _: &[f64], w: &[f64], out: &mut [f64]) {
            self.rhs(w, out)
        }
        fn soa_term(&self, _: &[f64], _: &[f64], _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    fn frozen_traj(values: Vec<f64>, n_steps: usize) -> Trajectory {
        let n = values.len();
        integrate(
            &Frozen(n),
            &StateVector::new(values, 0).unwrap(),
            TimeGrid::new(0.1, n_steps).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn series_validation() {
        assert!(ObservationSeries::new(vec![0.0], vec![vec![1.0]], Sigma::Shared(1.0)).is_err());
        assert!(ObservationSeries::new(vec![0.2, 0.1], vec![vec![1.0], vec![1.0]], Sigma::Shared(1.0)).is_err());
        assert!(ObservationSeries::new(vec![0.1], vec![vec![f64::NAN]], Sigma::Shared(1.0)).is_err());
        assert!(ObservationSeries::new(vec![0.1], vec![vec![1.0, 2.0]], Sigma::PerChannel(vec![1.0])).is_err());
        assert!(ObservationSeries::new(vec![0.1], vec![vec![1.0]], Sigma::Shared(-1.0)).is_err());
    }

    #[test]
    fn observation_time_ladder() {
        let t = observation_times(0.1, 102.4, 0.1).unwrap();
        assert_eq!(t.len(), 1024);
        assert!((t[1023] - 102.4).abs() < 1e-9);
        assert_eq!(observation_times(5.0, 30.0, 0.1).unwrap().len(), 251);
        assert_eq!(observation_times(0.1, 0.2, 0.1).unwrap().len(), 2);
        assert!(observation_times(0.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn noiseless_synthetic_is_exact() {
        let traj = integrate(
            &Relax(3),
            &StateVector::new(vec![0.9, 0.5, 0.1], 0).unwrap(),
            TimeGrid::new(0.1, 20).unwrap(),
        )
        .unwrap();
        let op = Projection::leading(3, 3).unwrap();
        let obs = make_synthetic(&traj, &op, &[0.5, 1.0, 2.0], 0.0, 3).unwrap();
        for (s, step) in [5, 10, 20].into_iter().enumerate() {
            assert_eq!(obs.value(s), traj.state(step));
        }
        assert!(make_synthetic(&traj, &op, &[2.1], 0.0, 3).is_err());
    }

    #[test]
    fn synthetic_noise_statistics() {
        let traj = frozen_traj(vec![0.5; 100], 100);
        let op = Projection::leading(100, 100).unwrap();
        let times: Vec<f64> = (1..=100).map(|s| s as f64 * 0.1).collect();
        let obs = make_synthetic(&traj, &op, &times, 0.01, 42).unwrap();
        let residuals: Vec<f64> = obs.values().iter().flatten().map(|d| d - 0.5).collect();
        assert_eq!(residuals.len(), 10_000);
        let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (residuals.len() - 1) as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.03 * 0.01, "std {}", var.sqrt());
        assert!(mean.abs() < 4.0 * 0.01 / 100.0);
    }

    #[test]
    fn synthetic_is_reproducible() {
        let traj = frozen_traj(vec![0.3; 8], 10);
        let op = Projection::leading(8, 8).unwrap();
        let a = make_synthetic(&traj, &op, &[0.1, 0.5, 1.0], 0.2, 9).unwrap();
        let b = make_synthetic(&traj, &op, &[0.1, 0.5, 1.0], 0.2, 9).unwrap();
        let c = make_synthetic(&traj, &op, &[0.1, 0.5, 1.0], 0.2, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_cost_log_term_only() {
        let traj = frozen_traj(vec![0.2, 0.4, 0.6, 0.8], 1);
        let op = Projection::leading(4, 4).unwrap();
        let obs = ObservationSeries::new(vec![0.1], vec![traj.state(1).to_vec()], Sigma::Shared(1.0)).unwrap();
        let c = cost_full(&traj, &op, &obs).unwrap();
        assert!((c.total - 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!(c.includes_log_term);
    }

    #[test]
    fn full_cost_single_residual() {
        let traj = frozen_traj(vec![0.25], 1);
        let op = Projection::leading(1, 1).unwrap();
        let r = 0.7;
        let obs = ObservationSeries::new(vec![0.1], vec![vec![0.25 + r]], Sigma::Shared(1.0)).unwrap();
        let c = cost_full(&traj, &op, &obs).unwrap();
        let expected = (2.0 * std::f64::consts::PI).ln() / 2.0 + r * r / 2.0;
        assert!((c.total - expected).abs() < 1e-14);
    }

    fn random_case(seed: u64) -> (Trajectory, Projection, ObservationSeries) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta0: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let traj = integrate(&Relax(6), &StateVector::new(theta0, 0).unwrap(), TimeGrid::new(0.1, 12).unwrap()).unwrap();
        let op = Projection::leading(6, 6).unwrap();
        let obs = make_synthetic(&traj, &op, &[0.3, 0.7, 1.2], 0.4, seed).unwrap();
        (traj, op, obs)
    }

    #[test]
    fn costs_match_brute_force() {
        for seed in 0..5 {
            let (traj, op, obs) = random_case(seed);
            let sigma = 0.4f64;
            let mut full = 0.0;
            let mut misfit = 0.0;
            for (s, step) in [3usize, 7, 12].into_iter().enumerate() {
                for i in 0..6 {
                    let r = obs.value(s)[i] - traj.state(step)[i];
                    full += 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() + r * r / (2.0 * sigma * sigma);
                    misfit += 0.5 * r * r;
                }
            }
            let cf = cost_full(&traj, &op, &obs).unwrap();
            let cm = cost_misfit(&traj, &op, &obs).unwrap();
            assert!((cf.total - full).abs() <= 1e-12 * full.abs());
            assert!((cm.total - misfit).abs() <= 1e-12 * misfit);
            assert!((cf.per_time.iter().sum::<f64>() - cf.total).abs() <= 1e-12 * cf.total.abs());
            assert_eq!(cm.per_time.len(), 3);
        }
    }

    #[test]
    fn misfit_trivial_values() {
        let traj = frozen_traj(vec![0.1, 0.2, 0.3], 2);
        let op = Projection::leading(3, 3).unwrap();
        let exact = ObservationSeries::new(vec![0.2], vec![traj.state(2).to_vec()], Sigma::Shared(0.1)).unwrap();
        assert_eq!(cost_misfit(&traj, &op, &exact).unwrap().total, 0.0);
        let off = ObservationSeries::new(vec![0.2], vec![vec![0.1, 2.2, 0.3]], Sigma::Shared(0.1)).unwrap();
        assert!((cost_misfit(&traj, &op, &off).unwrap().total - 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_snapshot_detected() {
        let traj = frozen_traj(vec![0.1], 2);
        let op = Projection::leading(1, 1).unwrap();
        let obs = ObservationSeries::new(vec![0.5], vec![vec![0.1]], Sigma::Shared(0.1)).unwrap();
        assert!(matches!(cost_misfit(&traj, &op, &obs), Err(Error::MissingSnapshot { step: 5, .. })));
    }

    #[test]
    fn argmin_consistency() {
        let (traj_a, op, obs) = random_case(1);
        let (traj_b, _, _) = random_case(2);
        let (ja, jb) = (cost_full(&traj_a, &op, &obs).unwrap().total, cost_full(&traj_b, &op, &obs).unwrap().total);
        let (ma, mb) = (cost_misfit(&traj_a, &op, &obs).unwrap().total, cost_misfit(&traj_b, &op, &obs).unwrap().total);
        assert_eq!(ja < jb, ma < mb);
    }

    #[test]
    fn sigma_hat_values() {
        let traj = frozen_traj(vec![0.1, 0.2], 3);
        let op = Projection::leading(2, 2).unwrap();
        let exact = ObservationSeries::new(vec![0.1, 0.2], vec![vec![0.1, 0.2]; 2], Sigma::Shared(1.0)).unwrap();
        assert_eq!(sigma_hat(&traj, &op, &exact).unwrap(), 0.0);
        let shifted =
            ObservationSeries::new(vec![0.1, 0.2], vec![vec![0.1 - 0.3, 0.2 - 0.3]; 2], Sigma::Shared(1.0)).unwrap();
        assert!((sigma_hat(&traj, &op, &shifted).unwrap() - 0.3).abs() < 1e-15);
        let per = sigma_hat_per_channel(&traj, &op, &shifted).unwrap();
        assert!(per.iter().all(|s| (s - 0.3).abs() < 1e-15));
        assert!(matches!(sigma_hat(&traj, &op, &ObservationSeries::empty(1.0)), Err(Error::EmptyObservations)));
    }

    #[test]
    fn sigma_hat_recovers_noise_level() {
        let traj = frozen_traj(vec![0.5; 200], 50);
        let op = Projection::leading(200, 200).unwrap();
        let times: Vec<f64> = (1..=50).map(|s| s as f64 * 0.1).collect();
        let obs = make_synthetic(&traj, &op, &times, 0.3, 5).unwrap();
        let s = sigma_hat(&traj, &op, &obs).unwrap();
        assert!((0.29..=0.31).contains(&s), "{s}");
    }

    #[test]
    fn sigma_hat_minimizes_full_cost() {
        let (traj, op, obs) = random_case(4);
        let s = sigma_hat(&traj, &op, &obs).unwrap();
        let at = |sig: f64| cost_full(&traj, &op, &obs.clone().with_sigma(Sigma::Shared(sig))).unwrap().total;
        assert!(at(s * 1.01) > at(s));
        assert!(at(s * 0.99) > at(s));
    }

    #[test]
    fn forcing_values() {
        let op = Projection::leading(3, 3).unwrap();
        assert_eq!(misfit_forcing(&op, &[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], None), vec![0.0; 3]);
        let f = misfit_forcing(&op, &[0.1, 0.2, 0.3], &[0.1, 0.5, 0.3], None);
        assert_eq!(f[0], 0.0);
        assert!((f[1] + 0.3).abs() < 1e-15);
        assert_eq!(f[2], 0.0);
        let weighted = misfit_forcing(&op, &[0.1, 0.2, 0.3], &[0.1, 0.5, 0.3], Some(&[4.0, 4.0, 4.0]));
        assert!((weighted[1] + 1.2).abs() < 1e-15);
    }

    #[test]
    fn forcing_rejects_non_observation_step() {
        let (traj, op, obs) = random_case(0);
        let map = obs.step_map(&traj.grid()).unwrap();
        assert!(misfit_forcing_at(&op, &obs, &map, 3, traj.state(3), CostKind::Misfit).is_ok());
        assert!(matches!(
            misfit_forcing_at(&op, &obs, &map, 4, traj.state(4), CostKind::Misfit),
            Err(Error::NotAnObservationTime { step: 4 })
        ));
    }

    #[test]
    fn forcing_is_gradient_of_snapshot_misfit() {
        // Partial projection, so unobserved components must get zero forcing.
        let op = Projection::new(5, vec![0, 2, 3]).unwrap();
        let theta = [0.3, 0.9, 0.1, 0.55, 0.42];
        let data = [0.2, 0.4, 0.8];
        let misfit = |t: &[f64]| -> f64 {
            let mut p = [0.0; 3];
            op.apply(t, &mut p);
            0.5 * p.iter().zip(&data).map(|(p, d)| (d - p).powi(2)).sum::<f64>()
        };
        let g = misfit_forcing(&op, &theta, &data, None);
        let h = 1e-6;
        for i in 0..5 {
            let mut t = theta;
            t[i] += h;
            let jp = misfit(&t);
            t[i] -= 2.0 * h;
            let fd = (jp - misfit(&t)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-8 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
        assert_eq!(g[1], 0.0);
        assert_eq!(g[4], 0.0);
    }
}
