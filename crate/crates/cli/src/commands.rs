//! Subcommands other than `verify`.

use std::path::Path;

use anyhow::{anyhow, Context};
use serde::Serialize;
use soada::harness::{run_experiment_1_with, run_experiment_2, run_experiment_3, ScopeChoice, Twin};
use soada::integrator::euler_step_into;
use soada::observation::{make_synthetic, observation_times};
use soada::optimize::{minimize_with, uncertainty_at, MinimizeOptions, MinimizeResult, UncertaintyScope};
use soada::phasefield::{critical_radius, m_from_b, mean, CriticalRadiusConfig};
use soada::{integrate, Linearization, Model, ObservationSeries, PfGrid, Problem, Projection, StateVector, TimeGrid};

use crate::config::{InitialSection, ModelKind, RunConfig};
use crate::output::Outputs;
use crate::Failure;

/// Model, observation operator and true initial state for one run.
pub enum System {
    PhaseField(Box<Twin>),
    Linear {
        model: soada::linear::LinearModel,
        op: Projection,
        truth: StateVector,
    },
}

impl System {
    pub fn build(cfg: &RunConfig) -> anyhow::Result<Self> {
        Self::try_build(cfg).map_err(|e| Failure::Config(e).into())
    }

    fn try_build(cfg: &RunConfig) -> anyhow::Result<Self> {
        match cfg.model.kind {
            ModelKind::PhaseField => Ok(Self::PhaseField(Box::new(Twin::new(cfg.twin()?)?))),
            ModelKind::Linear => {
                let n = cfg.model.dim;
                let model = soada::linear::LinearModel::new(n, cfg.model.matrix.clone())?;
                let indices = if cfg.observation.indices.is_empty() {
                    (0..n).collect()
                } else {
                    cfg.observation.indices.clone()
                };
                let values = match &cfg.initial {
                    InitialSection::Values { values } => values.clone(),
                    InitialSection::Uniform { value } => vec![*value; n],
                    _ => anyhow::bail!("the linear model takes `values` or `uniform` initial states"),
                };
                let truth = StateVector::new(values, 0)?;
                if truth.len() != n {
                    anyhow::bail!("initial state has {} values, model dimension is {n}", truth.len());
                }
                truth.check_open_unit()?;
                Ok(Self::Linear {
                    model,
                    op: Projection::new(n, indices)?,
                    truth,
                })
            }
        }
    }

    pub fn model(&self) -> &dyn Model {
        match self {
            Self::PhaseField(t) => &t.model,
            Self::Linear { model, .. } => model,
        }
    }

    pub fn op(&self) -> &Projection {
        match self {
            Self::PhaseField(t) => &t.op,
            Self::Linear { op, .. } => op,
        }
    }

    pub fn truth(&self) -> &StateVector {
        match self {
            Self::PhaseField(t) => &t.truth,
            Self::Linear { truth, .. } => truth,
        }
    }

    pub fn grid(&self) -> Option<&PfGrid> {
        match self {
            Self::PhaseField(t) => Some(t.grid()),
            Self::Linear { .. } => None,
        }
    }

    fn guess(&self, cfg: &RunConfig) -> anyhow::Result<StateVector> {
        match self {
            Self::PhaseField(t) => Ok(t.guess()?),
            Self::Linear { truth, .. } => {
                let g = if cfg.optimizer.guess.is_empty() {
                    vec![0.5; truth.len()]
                } else {
                    cfg.optimizer.guess.clone()
                };
                if g.len() != truth.len() {
                    return Err(Failure::Config(anyhow!("optimizer.guess must have {} values", truth.len())).into());
                }
                Ok(StateVector::new(g, 0)?)
            }
        }
    }

    fn free(&self) -> Vec<usize> {
        match self {
            Self::PhaseField(t) => t.free(),
            Self::Linear { truth, .. } => (0..truth.len()).collect(),
        }
    }

    /// Index of `b` for the phase field.
    fn param_index(&self) -> Option<usize> {
        self.grid().map(PfGrid::cells)
    }
}

/// `t0p5` for 0.5; snapshot names must not contain dots.
fn time_tag(t: f64) -> String {
    format!("t{t}").replace('.', "p").replace('-', "m")
}

#[derive(Serialize)]
struct SimulateSummary {
    times: Vec<f64>,
    mean_phi: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    states: Vec<Vec<f64>>,
}

pub fn simulate(cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<()> {
    let sys = System::build(cfg)?;
    let model = sys.model();
    let mut times = cfg.simulate.times.clone();
    times.sort_by(f64::total_cmp);
    let t_end = times.last().copied().unwrap_or(0.0);
    let grid = TimeGrid::covering(cfg.model.dt, t_end)?;
    let steps: Vec<usize> = times.iter().map(|&t| grid.step_of(t)).collect::<Result<_, _>>()?;

    let n_field = model.n_state();
    let mut theta = sys.truth().as_slice().to_vec();
    let mut next = vec![0.0; theta.len()];
    let mut scratch = vec![0.0; theta.len()];
    let mut summary = SimulateSummary {
        times: Vec::new(),
        mean_phi: Vec::new(),
        states: Vec::new(),
    };
    let mut pending = steps.iter().zip(&times).peekable();
    for k in 0..=grid.n_steps() {
        while let Some((_, &t)) = pending.next_if(|(&s, _)| s == k) {
            let field = &theta[..n_field];
            summary.times.push(t);
            summary.mean_phi.push(mean(field));
            match sys.grid() {
                Some(g) => {
                    let m = m_from_b(theta[n_field]);
                    out.write_snapshot(&time_tag(t), g, t, field, Some(m))?;
                }
                None => summary.states.push(field.to_vec()),
            }
        }
        if k == grid.n_steps() {
            break;
        }
        euler_step_into(model, &theta, grid.dt(), &mut scratch, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(soada::Error::NonFiniteState { step: k + 1 }.into());
        }
        std::mem::swap(&mut theta, &mut next);
    }
    out.write_json("summary.json", &summary)?;
    Ok(())
}

/// Series from `observation.file`, or drawn from the truth with the run seed.
fn observations(cfg: &RunConfig, sys: &System) -> anyhow::Result<ObservationSeries> {
    let o = &cfg.observation;
    if let Some(file) = &o.file {
        let (_, obs) = soada::io::read_series(Path::new(file)).with_context(|| format!("reading {file}"))?;
        return Ok(obs);
    }
    let times = observation_times(o.t_min, o.t_max, o.delta_t)?;
    let traj = integrate(sys.model(), sys.truth(), TimeGrid::covering(cfg.model.dt, o.t_max)?)?;
    Ok(make_synthetic(&traj, sys.op(), &times, o.sigma, cfg.seed)?)
}

pub fn make_obs(cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<()> {
    let sys = System::build(cfg)?;
    let obs = observations(cfg, &sys)?;
    out.write_series("obs", &obs, sys.grid())?;
    Ok(())
}

#[derive(Serialize)]
struct AssimilateSummary {
    termination: String,
    iterations: usize,
    evaluations: usize,
    cost: f64,
    grad_norm: f64,
    sigma_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    m_hat: Option<f64>,
    clamped_components: usize,
}

/// Minimizes and writes the estimate, trace and summary.
fn estimate<'a>(
    cfg: &RunConfig,
    sys: &'a System,
    obs: &'a ObservationSeries,
    out: &mut Outputs,
) -> anyhow::Result<(Problem<'a>, MinimizeResult)> {
    let grid = obs.minimal_grid(cfg.model.dt)?;
    let problem = Problem::new(sys.model(), sys.op(), obs, grid)?.with_cost(cfg.cost());
    let opts = MinimizeOptions {
        free: Some(sys.free()),
        track: sys.param_index(),
    };
    let res = minimize_with(&problem, &sys.guess(cfg)?, &cfg.lbfgs(), &opts, &mut |_| {})?;
    out.write_csv("trace.csv", &res.trace)?;
    match sys.grid() {
        Some(g) => {
            let m = m_from_b(res.theta_hat[g.cells()]);
            out.write_snapshot("estimate", g, 0.0, res.theta_hat.field(), Some(m))?;
        }
        None => {
            out.write_json("estimate.json", &res.theta_hat.as_slice())?;
        }
    }
    let traj = problem.forward(&res.theta_hat)?;
    let summary = AssimilateSummary {
        termination: format!("{:?}", res.termination),
        iterations: res.iterations,
        evaluations: res.evaluations,
        cost: res.cost,
        grad_norm: res.grad_norm,
        sigma_hat: soada::observation::sigma_hat(&traj, sys.op(), obs)?,
        m_hat: sys.param_index().map(|i| m_from_b(res.theta_hat[i])),
        clamped_components: res.clamp_warning.as_ref().map_or(0, |w| w.clamped),
    };
    out.write_json("summary.json", &summary)?;
    Ok((problem, res))
}

pub fn assimilate(cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<MinimizeResult> {
    let sys = System::build(cfg)?;
    let obs = observations(cfg, &sys)?;
    let (_, res) = estimate(cfg, &sys, &obs, out)?;
    Ok(res)
}

#[derive(Serialize)]
struct UncertaintyRow {
    component: usize,
    r_l: f64,
    diag_entry: f64,
    sigma_hat: f64,
    std_dev: Option<f64>,
    valid: bool,
    cr_iterations: usize,
    cr_residual: f64,
    cr_converged: bool,
    grad_norm: f64,
}

pub fn uncertainty(cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<()> {
    let sys = System::build(cfg)?;
    let obs = observations(cfg, &sys)?;
    let components = if cfg.uncertainty.components.is_empty() {
        match sys.param_index() {
            Some(i) => vec![i],
            None => (0..sys.truth().len()).collect(),
        }
    } else {
        cfg.uncertainty.components.clone()
    };
    if let Some(&c) = components.iter().find(|&&c| c >= sys.truth().len()) {
        return Err(Failure::Config(anyhow!("uncertainty component {c} is outside the state")).into());
    }
    let (problem, res) = estimate(cfg, &sys, &obs, out)?;
    let lin = Linearization::new(problem, &res.theta_hat)?;
    let scope = match cfg.uncertainty.scope {
        ScopeChoice::Full => UncertaintyScope::Full,
        ScopeChoice::Free => UncertaintyScope::Subset(sys.free()),
    };
    let mut rows = Vec::with_capacity(components.len());
    for &l in &components {
        let u = uncertainty_at(&lin, l, &scope, &cfg.cr())?;
        if !u.is_valid() {
            eprintln!("warning: r_{l} = {:e} is not positive; variance is undetermined", u.r_l);
        }
        rows.push(UncertaintyRow {
            component: l,
            r_l: u.r_l,
            diag_entry: u.diag_entry,
            sigma_hat: u.sigma_hat,
            std_dev: u.std_dev,
            valid: u.is_valid(),
            cr_iterations: u.solver.iterations,
            cr_residual: u.solver.residual_norm,
            cr_converged: u.solver.converged,
            grad_norm: u.grad_norm,
        });
    }
    out.write_csv("uncertainty.csv", &rows)?;
    Ok(())
}

fn spot_threshold(cfg: &RunConfig) -> anyhow::Result<f64> {
    if let Some(r) = cfg.harness.critical_radius {
        return Ok(r * cfg.model.eps);
    }
    let rc_cfg = CriticalRadiusConfig {
        dt: cfg.model.dt,
        spacing: cfg.grid.spacing,
        tau: cfg.model.tau,
        eps: cfg.model.eps,
        ..CriticalRadiusConfig::default()
    };
    Ok(critical_radius(cfg.model.m, &rc_cfg)?)
}

pub fn twin(cfg: &RunConfig, out: &mut Outputs) -> anyhow::Result<()> {
    let twin_cfg = cfg.twin().map_err(Failure::Config)?;
    twin_cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    match cfg.harness.experiment {
        1 => {
            let res = run_experiment_1_with(&twin_cfg, cfg.harness.sweep, &cfg.harness.values, &mut |r| {
                eprintln!(
                    "{} = {:e} trial {}: m_hat = {:?}, delta_m = {:?}",
                    cfg.harness.sweep.name(),
                    r.value,
                    r.trial,
                    r.m_hat,
                    r.delta_m
                );
            })?;
            out.write_csv("trials.csv", &res.trials)?;
            out.write_csv("points.csv", &res.points)?;
            out.write_json("sweep.json", &res)?;
        }
        e => {
            let rc = spot_threshold(cfg)?;
            let rec = if e == 2 {
                run_experiment_2(&twin_cfg, rc)?
            } else {
                run_experiment_3(&twin_cfg, rc)?
            };
            let grid = PfGrid::new(twin_cfg.nx, twin_cfg.ny, twin_cfg.spacing)?;
            out.write_snapshot("estimate", &grid, 0.0, &rec.phi_hat, Some(rec.m_hat))?;
            if let Some(snap) = &rec.phi_snapshot {
                let tag = format!("iter{}", twin_cfg.snapshot_iteration);
                out.write_snapshot(&tag, &grid, 0.0, snap, None)?;
            }
            out.write_csv("trace.csv", &rec.trace)?;
            out.write_json("record.json", &rec)?;
        }
    }
    Ok(())
}
