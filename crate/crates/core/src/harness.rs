//! Twin experiments on the phase-field model: synthetic truth, noisy
//! observations, estimation, and the diagnostics used to judge the result.
//!
//! * Experiment I estimates `m` alone with `φ(0)` fixed to the truth and
//!   sweeps one observation setting (`T_max`, `ΔT` or `σ`).
//! * Experiment II estimates `φ(0)` and `m` together.
//! * Experiment III estimates `φ(0)` alone with `m` fixed.
//!
//! Trial `j` draws its noise from seed `seed + j`. Everything is
//! sequential, so identical configurations give bit-identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{Linearization, Problem};
use crate::error::{Error, Result};
use crate::integrator::{integrate, integrate_final, TimeGrid, Trajectory};
use crate::model::StateVector;
use crate::observation::{make_synthetic, observation_times, ObservationSeries, Projection};
use crate::optimize::{
    minimize_with, uncertainty_at, CrConfig, Iterate, LbfgsConfig, MinimizeOptions, MinimizeResult, Termination,
    ToleranceMode, TraceRow, UncertaintyResult, UncertaintyScope,
};
use crate::phasefield::{b_from_m, disk_field, m_from_b, PfGrid, PhaseField};

/// How the true initial field is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TruthSpec {
    /// `count` disks at uniformly random centres with radii drawn from
    /// `[r_min, r_max]` (units of ε), merged by pointwise maximum.
    Blobs { count: usize, r_min: f64, r_max: f64, seed: u64 },
    /// Explicit disks.
    Disks { disks: Vec<Disk> },
    /// A field supplied by the caller, row-major.
    Field { values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disk {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMode {
    ParameterOnly,
    Simultaneous,
    StateOnly,
}

/// Which Hessian the uncertainty of `m` is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeChoice {
    /// Every component of `Θ`, including those held fixed by the optimizer.
    #[default]
    Full,
    /// Only the components the optimizer moved.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwinConfig {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub tau: f64,
    pub eps: f64,
    pub dt: f64,
    pub m_true: f64,
    pub truth: TruthSpec,
    pub t_min: f64,
    pub t_max: f64,
    pub delta_t: f64,
    pub sigma: f64,
    pub n_trials: usize,
    pub seed: u64,
    pub m_guess: f64,
    pub phi_guess: f64,
    pub mode: EstimateMode,
    pub grad_tol: f64,
    pub absolute_tolerance: bool,
    pub max_iters: usize,
    /// LBFGS history length.
    pub memory: usize,
    pub cr_tol: f64,
    pub cr_max_iters: usize,
    pub scope: ScopeChoice,
    /// Inclusive range of sweep values entering the slope fit.
    pub fit_window: Option<(f64, f64)>,
    /// Iteration whose estimate is kept for the plateau comparison.
    pub snapshot_iteration: usize,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TwinConfig {
    /// 75×50 grid, five trials.
    pub fn desk() -> Self {
        Self {
            nx: 75,
            ny: 50,
            spacing: 1.0,
            tau: 1.0,
            eps: 1.0,
            dt: 0.1,
            m_true: 0.1,
            truth: TruthSpec::Blobs {
                count: 5,
                r_min: 8.0,
                r_max: 11.0,
                seed: 7,
            },
            t_min: 0.1,
            t_max: 102.4,
            delta_t: 0.1,
            sigma: 0.01,
            n_trials: 5,
            seed: 1,
            m_guess: -0.1,
            phi_guess: 0.2,
            mode: EstimateMode::ParameterOnly,
            grad_tol: 1e-8,
            absolute_tolerance: false,
            max_iters: 500,
            memory: 10,
            cr_tol: 1e-8,
            cr_max_iters: 2000,
            scope: ScopeChoice::Full,
            fit_window: None,
            snapshot_iteration: 31,
        }
    }

    /// 300×200 grid, twenty trials.
    pub fn paper() -> Self {
        Self {
            nx: 300,
            ny: 200,
            n_trials: 20,
            truth: TruthSpec::Blobs {
                count: 40,
                r_min: 8.0,
                r_max: 14.0,
                seed: 7,
            },
            ..Self::desk()
        }
    }

    /// Experiment II settings on top of `self`.
    pub fn experiment_2(self, sigma: f64) -> Self {
        Self {
            mode: EstimateMode::Simultaneous,
            t_min: 5.0,
            t_max: 30.0,
            delta_t: 0.1,
            sigma,
            phi_guess: 0.2,
            m_guess: -0.2,
            max_iters: 3000,
            ..self
        }
    }

    /// Experiment III settings on top of `self`.
    pub fn experiment_3(self) -> Self {
        Self {
            mode: EstimateMode::StateOnly,
            t_min: 8.0,
            t_max: 30.0,
            delta_t: 0.1,
            sigma: 0.3,
            phi_guess: 0.2,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        PfGrid::new(self.nx, self.ny, self.spacing)?;
        if !(self.t_min > 0.0 && self.t_min <= self.t_max) {
            return Err(Error::Invalid(format!(
                "need 0 < T_min <= T_max, got {} and {}",
                self.t_min, self.t_max
            )));
        }
        if !(self.delta_t > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Invalid("dT and dt must be positive".into()));
        }
        if self.n_trials == 0 {
            return Err(Error::Invalid("n_trials must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Invalid(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        for m in [self.m_true, self.m_guess] {
            if !(m > -0.5 && m < 0.5) {
                return Err(Error::Invalid(format!("m must lie in (-1/2, 1/2), got {m}")));
            }
        }
        if !(self.phi_guess > 0.0 && self.phi_guess < 1.0) {
            return Err(Error::Invalid(format!("phi_guess must lie in (0, 1), got {}", self.phi_guess)));
        }
        if let Some((lo, hi)) = self.fit_window {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Invalid(format!("fit window ({lo}, {hi}) must be positive and ordered")));
            }
        }
        Ok(())
    }

    pub fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            grad_tol: self.grad_tol,
            max_iters: self.max_iters,
            memory: self.memory,
            tolerance_mode: if self.absolute_tolerance {
                ToleranceMode::Absolute
            } else {
                ToleranceMode::Relative
            },
            stall_is_termination: true,
            ..LbfgsConfig::default()
        }
    }

    pub fn cr(&self) -> CrConfig {
        CrConfig {
            rel_tol: self.cr_tol,
            max_iters: Some(self.cr_max_iters),
            ..CrConfig::default()
        }
    }
}

/// Disks with random centres and radii.
pub fn random_disks(grid: &PfGrid, count: usize, r_min: f64, r_max: f64, seed: u64) -> Vec<Disk> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lx, ly) = (grid.nx() as f64 * grid.spacing(), grid.ny() as f64 * grid.spacing());
    (0..count)
        .map(|_| Disk {
            x: rng.random_range(0.0..lx),
            y: rng.random_range(0.0..ly),
            radius: if r_max > r_min { rng.random_range(r_min..r_max) } else { r_min },
        })
        .collect()
}

/// Pointwise maximum of tanh-edged disks.
pub fn disks_field(grid: &PfGrid, disks: &[Disk], eps: f64) -> Vec<f64> {
    let mut field = vec![0.0f64; grid.cells()];
    for d in disks {
        for (f, v) in field.iter_mut().zip(disk_field(grid, d.x, d.y, d.radius, eps)) {
            *f = f.max(v);
        }
    }
    field
}

pub fn truth_field(spec: &TruthSpec, grid: &PfGrid, eps: f64) -> Result<Vec<f64>> {
    match spec {
        TruthSpec::Blobs {
            count,
            r_min,
            r_max,
            seed,
        } => {
            if !(*r_min > 0.0 && r_max >= r_min) {
                return Err(Error::Invalid(format!("blob radii ({r_min}, {r_max}) must be positive and ordered")));
            }
            Ok(disks_field(grid, &random_disks(grid, *count, *r_min, *r_max, *seed), eps))
        }
        TruthSpec::Disks { disks } => Ok(disks_field(grid, disks, eps)),
        TruthSpec::Field { values } => {
            if values.len() != grid.cells() {
                return Err(Error::Dimension {
                    expected: grid.cells(),
                    got: values.len(),
                });
            }
            if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid("truth field must lie in [0, 1]".into()));
            }
            Ok(values.clone())
        }
    }
}

/// Model, truth and observation operator shared by every trial.
pub struct Twin {
    pub cfg: TwinConfig,
    pub model: PhaseField,
    pub op: Projection,
    pub truth: StateVector,
}

impl Twin {
    pub fn new(cfg: TwinConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = PfGrid::new(cfg.nx, cfg.ny, cfg.spacing)?;
        let model = PhaseField::new(grid, cfg.tau, cfg.eps)?;
        let field = truth_field(&cfg.truth, &grid, cfg.eps)?;
        let truth = model.state(&field, cfg.m_true)?;
        let op = Projection::leading(grid.cells() + 1, grid.cells())?;
        Ok(Self { cfg, model, op, truth })
    }

    pub fn grid(&self) -> &PfGrid {
        self.model.grid()
    }

    pub fn cells(&self) -> usize {
        self.grid().cells()
    }

    pub fn truth_trajectory(&self, t_end: f64) -> Result<Trajectory> {
        integrate(&self.model, &self.truth, TimeGrid::covering(self.cfg.dt, t_end)?)
    }

    /// Synthetic series for trial `trial` drawn from a truth trajectory.
    pub fn observations(
        &self,
        truth: &Trajectory,
        t_min: f64,
        t_max: f64,
        delta_t: f64,
        sigma: f64,
        trial: usize,
    ) -> Result<ObservationSeries> {
        let times = observation_times(t_min, t_max, delta_t)?;
        make_synthetic(truth, &self.op, &times, sigma, self.cfg.seed.wrapping_add(trial as u64))
    }

    /// Starting point of the optimizer for the configured mode.
    pub fn guess(&self) -> Result<StateVector> {
        let m = self.cells();
        match self.cfg.mode {
            EstimateMode::ParameterOnly => {
                let mut g = self.truth.clone();
                g.as_mut_slice()[m] = b_from_m(self.cfg.m_guess);
                Ok(g)
            }
            EstimateMode::Simultaneous => self.model.state(&vec![self.cfg.phi_guess; m], self.cfg.m_guess),
            EstimateMode::StateOnly => self.model.state(&vec![self.cfg.phi_guess; m], self.cfg.m_true),
        }
    }

    /// Components the optimizer may move.
    pub fn free(&self) -> Vec<usize> {
        let m = self.cells();
        match self.cfg.mode {
            EstimateMode::ParameterOnly => vec![m],
            EstimateMode::Simultaneous => (0..=m).collect(),
            EstimateMode::StateOnly => (0..m).collect(),
        }
    }

    /// Minimizes `J′` for one observation series according to the mode.
    pub fn estimate<'s>(
        &'s self,
        obs: &'s ObservationSeries,
        observer: &mut dyn FnMut(&Iterate),
    ) -> Result<(Problem<'s>, MinimizeResult)> {
        let grid = obs.minimal_grid(self.cfg.dt)?;
        let problem = Problem::new(&self.model, &self.op, obs, grid)?;
        let opts = MinimizeOptions {
            free: Some(self.free()),
            track: Some(self.cells()),
        };
        let res = minimize_with(&problem, &self.guess()?, &self.cfg.lbfgs(), &opts, observer)?;
        Ok((problem, res))
    }

    /// Uncertainty of `m` at an optimum.
    pub fn m_uncertainty(&self, problem: Problem<'_>, theta_hat: &StateVector) -> Result<UncertaintyResult> {
        let lin = Linearization::new(problem, theta_hat)?;
        let scope = match self.cfg.scope {
            ScopeChoice::Full => UncertaintyScope::Full,
            ScopeChoice::Free => UncertaintyScope::Subset(self.free()),
        };
        uncertainty_at(&lin, self.cells(), &scope, &self.cfg.cr())
    }
}

/// The observation setting an experiment-I sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepVariable {
    TMax,
    DeltaT,
    Sigma,
}

impl SweepVariable {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TMax => "t_max",
            Self::DeltaT => "delta_t",
            Self::Sigma => "sigma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub value: f64,
    pub trial: usize,
    pub seed: u64,
    pub m_hat: Option<f64>,
    /// `δm̂`, absent when the variance is invalid or the trial failed.
    pub delta_m: Option<f64>,
    pub r_l: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub iterations: usize,
    pub cr_iterations: usize,
    pub cr_residual: Option<f64>,
    pub cr_converged: bool,
    pub error: Option<String>,
}

impl TrialRecord {
    /// A finished trial whose `r_l` came out non-positive.
    pub fn invalid_variance(&self) -> bool {
        self.error.is_none() && self.r_l.is_some_and(|r| r <= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mean_m_hat: Option<f64>,
    /// Mean over trials with a valid variance.
    pub mean_delta_m: Option<f64>,
    pub n_valid: usize,
    pub n_invalid: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub variable: SweepVariable,
    pub points: Vec<SweepPoint>,
    pub trials: Vec<TrialRecord>,
    pub fit: Option<SlopeFit>,
    pub fit_window: Option<(f64, f64)>,
}

/// Ordinary least squares of `log y` on `log x`. Needs two distinct `x`.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if n > 2 {
        let sse: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (sse / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some(SlopeFit {
        slope,
        stderr,
        intercept,
        n_points: n,
    })
}

fn run_trial(twin: &Twin, truth: &Trajectory, variable: SweepVariable, value: f64, trial: usize) -> TrialRecord {
    let cfg = &twin.cfg;
    let (mut t_max, mut delta_t, mut sigma) = (cfg.t_max, cfg.delta_t, cfg.sigma);
    match variable {
        SweepVariable::TMax => t_max = value,
        SweepVariable::DeltaT => delta_t = value,
        SweepVariable::Sigma => sigma = value,
    }
    let mut record = TrialRecord {
        value,
        trial,
        seed: cfg.seed.wrapping_add(trial as u64),
        m_hat: None,
        delta_m: None,
        r_l: None,
        sigma_hat: None,
        iterations: 0,
        cr_iterations: 0,
        cr_residual: None,
        cr_converged: false,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let obs = twin.observations(truth, cfg.t_min, t_max, delta_t, sigma, trial)?;
        let (problem, res) = twin.estimate(&obs, &mut |_| {})?;
        record.iterations = res.iterations;
        record.m_hat = Some(m_from_b(res.theta_hat[twin.cells()]));
        let unc = twin.m_uncertainty(problem, &res.theta_hat)?;
        record.r_l = Some(unc.r_l);
        record.sigma_hat = Some(unc.sigma_hat);
        record.delta_m = unc.std_dev;
        record.cr_iterations = unc.solver.iterations;
        record.cr_residual = Some(unc.solver.residual_norm);
        record.cr_converged = unc.solver.converged;
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record
}

fn summarize(value: f64, trials: &[TrialRecord]) -> SweepPoint {
    let m_hats: Vec<f64> = trials.iter().filter_map(|t| t.m_hat).collect();
    let deltas: Vec<f64> = trials.iter().filter_map(|t| t.delta_m).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    SweepPoint {
        value,
        mean_m_hat: mean(&m_hats),
        mean_delta_m: mean(&deltas),
        n_valid: deltas.len(),
        n_invalid: trials.iter().filter(|t| t.invalid_variance()).count(),
        n_failed: trials.iter().filter(|t| t.error.is_some()).count(),
    }
}

/// Experiment I: estimate `m` with `φ(0)` fixed to the truth for every
/// sweep value and trial, then fit the log-log slope of mean `δm̂`.
pub fn run_experiment_1(cfg: &TwinConfig, variable: SweepVariable, values: &[f64]) -> Result<SweepResult> {
    run_experiment_1_with(cfg, variable, values, &mut |_| {})
}

/// As [`run_experiment_1`], reporting each trial as it finishes.
pub fn run_experiment_1_with(
    cfg: &TwinConfig,
    variable: SweepVariable,
    values: &[f64],
    progress: &mut dyn FnMut(&TrialRecord),
) -> Result<SweepResult> {
    let cfg = TwinConfig {
        mode: EstimateMode::ParameterOnly,
        ..cfg.clone()
    };
    let twin = Twin::new(cfg.clone())?;
    let t_end = match variable {
        SweepVariable::TMax => values.iter().copied().fold(cfg.t_max.min(cfg.t_min), f64::max),
        _ => cfg.t_max,
    };
    let truth = twin.truth_trajectory(t_end)?;
    let mut trials = Vec::with_capacity(values.len() * cfg.n_trials);
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let start = trials.len();
        for trial in 0..cfg.n_trials {
            let rec = run_trial(&twin, &truth, variable, value, trial);
            progress(&rec);
            trials.push(rec);
        }
        points.push(summarize(value, &trials[start..]));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| cfg.fit_window.is_none_or(|(lo, hi)| p.value >= lo * (1.0 - 1e-12) && p.value <= hi * (1.0 + 1e-12)))
        .filter_map(|p| p.mean_delta_m.map(|d| (p.value, d)))
        .unzip();
    Ok(SweepResult {
        variable,
        points,
        trials,
        fit: loglog_fit(&xs, &ys),
        fit_window: cfg.fit_window,
    })
}

/// Root-mean-square difference of two fields.
pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spot {
    /// Sorted cell indices.
    pub cells: Vec<usize>,
    pub equivalent_radius: f64,
    pub above_critical: bool,
}

/// Periodic 4-connected components of `mask`, ordered by smallest cell.
pub fn connected_components(grid: &PfGrid, mask: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut cells = Vec::new();
        while let Some(i) = queue.pop_front() {
            cells.push(i);
            for j in grid.neighbours(i) {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        cells.sort_unstable();
        out.push(cells);
    }
    out
}

/// Components of `{φ > 1/2}` with their equivalent radii
/// `sqrt(area/π)·h`, flagged against `critical_radius` (units of ε).
pub fn spot_diagnostics(grid: &PfGrid, field: &[f64], critical_radius: f64) -> Vec<Spot> {
    let mask: Vec<bool> = field.iter().map(|&v| v > 0.5).collect();
    connected_components(grid, &mask)
        .into_iter()
        .map(|cells| {
            let equivalent_radius = (cells.len() as f64 / std::f64::consts::PI).sqrt() * grid.spacing();
            Spot {
                above_critical: equivalent_radius >= critical_radius,
                equivalent_radius,
                cells,
            }
        })
        .collect()
}

/// Spots of `estimate` that share no cell with any spot of `truth`.
pub fn spurious_spots(grid: &PfGrid, estimate: &[f64], truth: &[f64], critical_radius: f64) -> Vec<Spot> {
    spot_diagnostics(grid, estimate, critical_radius)
        .into_iter()
        .filter(|s| s.cells.iter().all(|&i| truth[i] <= 0.5))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEstimateRecord {
    pub mode: EstimateMode,
    pub sigma: f64,
    pub trace: Vec<TraceRow>,
    pub termination: String,
    pub iterations: usize,
    pub m_hat: f64,
    pub uncertainty: Option<UncertaintyRecord>,
    pub phi_hat: Vec<f64>,
    pub phi_true: Vec<f64>,
    /// `RMSE(φ̂(0), φ_true(0))`.
    pub rmse_initial: f64,
    /// RMSE of the two fields after integrating both to `T_min`.
    pub rmse_at_t_min: f64,
    /// Estimate kept at `snapshot_iteration`, when reached.
    pub phi_snapshot: Option<Vec<f64>>,
    pub cost_at_snapshot: Option<f64>,
    pub critical_radius: f64,
    pub spots: Vec<Spot>,
    pub spurious: Vec<Spot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub delta_m: Option<f64>,
    pub r_l: f64,
    pub sigma_hat: f64,
    pub cr_iterations: usize,
    pub cr_residual: f64,
    pub cr_converged: bool,
}

fn termination_name(t: Termination) -> String {
    match t {
        Termination::GradientTolerance => "gradient-tolerance",
        Termination::MaxIterations => "max-iterations",
        Termination::LineSearchStall => "line-search-stall",
    }
    .into()
}

fn run_state_estimate(cfg: TwinConfig, critical_radius: f64, with_uncertainty: bool) -> Result<StateEstimateRecord> {
    let twin = Twin::new(cfg)?;
    let cfg = &twin.cfg;
    let truth = twin.truth_trajectory(cfg.t_max)?;
    let obs = twin.observations(&truth, cfg.t_min, cfg.t_max, cfg.delta_t, cfg.sigma, 0)?;
    let m = twin.cells();
    let mut snapshot = None;
    let (problem, res) = twin.estimate(&obs, &mut |it| {
        if it.row.iter == cfg.snapshot_iteration {
            snapshot = Some((it.theta.field().to_vec(), it.row.cost));
        }
    })?;
    let uncertainty = if with_uncertainty {
        let u = twin.m_uncertainty(problem, &res.theta_hat)?;
        Some(UncertaintyRecord {
            delta_m: u.std_dev,
            r_l: u.r_l,
            sigma_hat: u.sigma_hat,
            cr_iterations: u.solver.iterations,
            cr_residual: u.solver.residual_norm,
            cr_converged: u.solver.converged,
        })
    } else {
        None
    };
    let phi_hat = res.theta_hat.field().to_vec();
    let phi_true = twin.truth.field().to_vec();
    let to_t_min = TimeGrid::covering(cfg.dt, cfg.t_min)?;
    let est_at = integrate_final(&twin.model, &res.theta_hat, to_t_min)?;
    let true_at = truth.field(to_t_min.n_steps());
    let grid = *twin.grid();
    let (phi_snapshot, cost_at_snapshot) = snapshot.map_or((None, None), |(f, c)| (Some(f), Some(c)));
    Ok(StateEstimateRecord {
        mode: cfg.mode,
        sigma: cfg.sigma,
        termination: termination_name(res.termination),
        iterations: res.iterations,
        m_hat: m_from_b(res.theta_hat[m]),
        uncertainty,
        rmse_initial: rmse(&phi_hat, &phi_true),
        rmse_at_t_min: rmse(&est_at[..m], true_at),
        spots: spot_diagnostics(&grid, &phi_hat, critical_radius),
        spurious: spurious_spots(&grid, &phi_hat, &phi_true, critical_radius),
        trace: res.trace,
        phi_hat,
        phi_true,
        phi_snapshot,
        cost_at_snapshot,
        critical_radius,
    })
}

/// Experiment II: joint estimate of `φ(0)` and `m`, with `δm̂` from the
/// full Hessian.
pub fn run_experiment_2(cfg: &TwinConfig, critical_radius: f64) -> Result<StateEstimateRecord> {
    let cfg = TwinConfig {
        mode: EstimateMode::Simultaneous,
        ..cfg.clone()
    };
    run_state_estimate(cfg, critical_radius, true)
}

/// Experiment III: `φ(0)` alone with `m` fixed to its true value.
pub fn run_experiment_3(cfg: &TwinConfig, critical_radius: f64) -> Result<StateEstimateRecord> {
    let cfg = TwinConfig {
        mode: EstimateMode::StateOnly,
        ..cfg.clone()
    };
    run_state_estimate(cfg, critical_radius, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TwinConfig {
        TwinConfig {
            nx: 12,
            ny: 10,
            truth: TruthSpec::Disks {
                disks: vec![Disk { x: 5.0, y: 5.0, radius: 4.0 }],
            },
            t_max: 1.0,
            n_trials: 2,
            ..TwinConfig::desk()
        }
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-1.5)).collect();
        let fit = loglog_fit(&x, &y).unwrap();
        assert!((fit.slope + 1.5).abs() < 1e-12);
        assert!(fit.stderr < 1e-10);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(loglog_fit(&[1.0], &[1.0]).is_none());
        assert!(loglog_fit(&[2.0, 2.0], &[1.0, 3.0]).is_none());
    }

    #[test]
    fn loglog_stderr_matches_hand_computation() {
        let x = [1.0f64, 10.0, 100.0];
        let y = [1.0f64, 10.0, 1000.0];
        let fit = loglog_fit(&x, &y).unwrap();
        // In log10 units the points are (0,0), (1,1), (2,3): slope 1.5.
        assert!((fit.slope - 1.5).abs() < 1e-12);
        let resid = [1.0f64 / 6.0, -1.0 / 3.0, 1.0 / 6.0];
        let sse: f64 = resid.iter().map(|r| (r * 10f64.ln()).powi(2)).sum();
        let sxx = 2.0 * 10f64.ln().powi(2);
        assert!((fit.stderr - (sse / sxx).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_field_has_no_spots() {
        let g = PfGrid::new(10, 8, 1.0).unwrap();
        assert!(spot_diagnostics(&g, &vec![0.0; 80], 7.3).is_empty());
    }

    #[test]
    fn single_disk_radius() {
        let g = PfGrid::new(40, 40, 1.0).unwrap();
        let f = disk_field(&g, 20.0, 20.0, 5.0, 1.0);
        let spots = spot_diagnostics(&g, &f, 7.3);
        assert_eq!(spots.len(), 1);
        assert!((spots[0].equivalent_radius - 5.0).abs() <= 1.0);
        assert!(!spots[0].above_critical);
    }

    #[test]
    fn components_wrap_periodically() {
        let g = PfGrid::new(6, 4, 1.0).unwrap();
        let mut mask = vec![false; 24];
        mask[g.index(0, 1)] = true;
        mask[g.index(5, 1)] = true;
        mask[g.index(2, 0)] = true;
        mask[g.index(2, 3)] = true;
        mask[g.index(3, 2)] = true;
        let comps = connected_components(&g, &mask);
        assert_eq!(comps, vec![vec![2, 20], vec![6, 11], vec![15]]);
    }

    /// Recursive flood fill over explicit coordinates.
    fn reference_components(nx: usize, ny: usize, mask: &[bool]) -> Vec<Vec<usize>> {
        fn fill(x: usize, y: usize, nx: usize, ny: usize, mask: &[bool], label: &mut [usize], id: usize) {
            let i = y * nx + x;
            if !mask[i] || label[i] != 0 {
                return;
            }
            label[i] = id;
            fill((x + 1) % nx, y, nx, ny, mask, label, id);
            fill((x + nx - 1) % nx, y, nx, ny, mask, label, id);
            fill(x, (y + 1) % ny, nx, ny, mask, label, id);
            fill(x, (y + ny - 1) % ny, nx, ny, mask, label, id);
        }
        let mut label = vec![0; nx * ny];
        let mut next = 1;
        for i in 0..nx * ny {
            if mask[i] && label[i] == 0 {
                fill(i % nx, i / nx, nx, ny, mask, &mut label, next);
                next += 1;
            }
        }
        (1..next)
            .map(|id| (0..nx * ny).filter(|&i| label[i] == id).collect())
            .collect()
    }

    #[test]
    fn components_match_reference_flood_fill() {
        let g = PfGrid::new(30, 20, 1.0).unwrap();
        for seed in 0..5 {
            let disks = random_disks(&g, 6, 1.5, 4.0, seed);
            let f = disks_field(&g, &disks, 1.0);
            let mask: Vec<bool> = f.iter().map(|&v| v > 0.5).collect();
            assert_eq!(connected_components(&g, &mask), reference_components(30, 20, &mask));
        }
    }

    #[test]
    fn spurious_spots_ignore_overlapping_components() {
        let g = PfGrid::new(40, 20, 1.0).unwrap();
        let truth = disk_field(&g, 10.0, 10.0, 5.0, 1.0);
        let mut est = disks_field(
            &g,
            &[Disk { x: 11.0, y: 10.0, radius: 5.0 }, Disk { x: 30.0, y: 10.0, radius: 2.0 }],
            1.0,
        );
        est[0] = est[0].max(0.0);
        let spurious = spurious_spots(&g, &est, &truth, 7.3);
        assert_eq!(spurious.len(), 1);
        assert!(spurious[0].equivalent_radius < 3.0);
    }

    #[test]
    fn config_validation_and_round_trip() {
        let mut cfg = TwinConfig::desk();
        assert!(cfg.validate().is_ok());
        cfg.t_min = 200.0;
        assert!(cfg.validate().is_err());
        let json = serde_json::to_string(&TwinConfig::desk()).unwrap();
        let back: TwinConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TwinConfig::desk());
        assert!(serde_json::from_str::<TwinConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn truth_field_errors() {
        let g = PfGrid::new(4, 4, 1.0).unwrap();
        assert!(truth_field(&TruthSpec::Field { values: vec![0.5; 3] }, &g, 1.0).is_err());
        assert!(truth_field(&TruthSpec::Field { values: vec![2.0; 16] }, &g, 1.0).is_err());
        let spec = TruthSpec::Blobs {
            count: 2,
            r_min: 1.0,
            r_max: 2.0,
            seed: 3,
        };
        assert_eq!(truth_field(&spec, &g, 1.0).unwrap(), truth_field(&spec, &g, 1.0).unwrap());
    }

    #[test]
    fn tiny_sweep_is_reproducible_and_recovers_m() {
        let cfg = tiny_cfg();
        let a = run_experiment_1(&cfg, SweepVariable::Sigma, &[1e-3, 1e-2]).unwrap();
        let b = run_experiment_1(&cfg, SweepVariable::Sigma, &[1e-3, 1e-2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials.len(), 4);
        for t in &a.trials {
            assert!(t.error.is_none(), "{:?}", t.error);
            assert!((t.m_hat.unwrap() - 0.1).abs() < 0.05);
        }
        assert!(a.fit.is_some());
    }

    #[test]
    fn noiseless_state_estimate_on_tiny_grid() {
        let cfg = TwinConfig {
            t_min: 0.1,
            t_max: 1.0,
            sigma: 0.0,
            grad_tol: 1e-10,
            max_iters: 2000,
            ..tiny_cfg()
        }
        .experiment_3();
        let cfg = TwinConfig {
            t_min: 0.1,
            t_max: 1.0,
            sigma: 0.0,
            ..cfg
        };
        let rec = run_experiment_3(&cfg, 7.3).unwrap();
        assert!(rec.rmse_initial < 1e-2, "rmse {}", rec.rmse_initial);
        assert!(rec.rmse_at_t_min < 1e-3);
    }
}
