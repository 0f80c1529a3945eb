//! Run configuration: a TOML document layered over profile defaults.
//!
//! Tables merge key by key, except that choosing a different `kind` of
//! initial state replaces that table outright. Unknown keys are rejected
//! after the merge.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use soada::harness::{Disk, EstimateMode, ScopeChoice, SweepVariable, TruthSpec, TwinConfig};
use soada::observation::CostKind;
use soada::optimize::{CrConfig, LbfgsConfig, ToleranceMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// Desk scale: 75×50 grid, five trials.
    Fast,
    /// Full scale: 300×200 grid, twenty trials.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub grid: GridSection,
    pub initial: InitialSection,
    pub simulate: SimulateSection,
    pub observation: ObservationSection,
    pub optimizer: OptimizerSection,
    pub uncertainty: UncertaintySection,
    pub harness: HarnessSection,
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    PhaseField,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub tau: f64,
    pub eps: f64,
    /// True interface parameter.
    pub m: f64,
    pub dt: f64,
    /// Linear model only: state length and row-major matrix.
    pub dim: usize,
    pub matrix: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSection {
    Blobs {
        count: usize,
        r_min: f64,
        r_max: f64,
        seed: u64,
    },
    Disks {
        disks: Vec<Disk>,
    },
    Uniform {
        value: f64,
    },
    /// A grid snapshot written by `simulate` or `assimilate`.
    Snapshot {
        path: String,
    },
    /// Explicit state, the linear model's usual choice.
    Values {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    pub t_min: f64,
    pub t_max: f64,
    pub delta_t: f64,
    pub sigma: f64,
    /// Observed components for the linear model; empty observes all.
    pub indices: Vec<usize>,
    /// Series written by `make-obs`; synthetic data are drawn when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimate {
    ParameterOnly,
    Simultaneous,
    StateOnly,
}

impl From<Estimate> for EstimateMode {
    fn from(e: Estimate) -> Self {
        match e {
            Estimate::ParameterOnly => EstimateMode::ParameterOnly,
            Estimate::Simultaneous => EstimateMode::Simultaneous,
            Estimate::StateOnly => EstimateMode::StateOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tolerance {
    Relative,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cost {
    Misfit,
    Full,
    ProfiledFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub estimate: Estimate,
    pub m_guess: f64,
    pub phi_guess: f64,
    /// Linear model only: initial guess; empty means 0.5 everywhere.
    pub guess: Vec<f64>,
    pub cost: Cost,
    pub grad_tol: f64,
    pub tolerance: Tolerance,
    pub max_iters: usize,
    pub memory: usize,
    pub armijo_c1: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySection {
    /// Components of `Θ`; empty selects `m` for the phase field and every
    /// component for the linear model.
    pub components: Vec<usize>,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub scope: ScopeChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessSection {
    /// 1, 2 or 3.
    pub experiment: u8,
    pub sweep: SweepVariable,
    pub values: Vec<f64>,
    pub n_trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<[f64; 2]>,
    pub snapshot_iteration: usize,
    /// Spot threshold in units of ε; computed by bisection when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critical_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    pub nx: usize,
    pub ny: usize,
    pub n_times: usize,
    /// Run the suites with an empty observation series.
    pub zero_observations: bool,
    pub fd_step: f64,
    pub gradient_tol: f64,
    pub symmetry_pairs: usize,
    pub symmetry_tol: f64,
    pub hvp_fd_tol: f64,
    pub pair_tol: f64,
    pub cr_tol: f64,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let (nx, ny, n_trials, count) = match profile {
            Profile::Fast => (75, 50, 5, 5),
            Profile::Paper => (300, 200, 20, 40),
        };
        Self {
            seed: 1,
            model: ModelSection {
                kind: ModelKind::PhaseField,
                tau: 1.0,
                eps: 1.0,
                m: 0.1,
                dt: 0.1,
                dim: 0,
                matrix: Vec::new(),
            },
            grid: GridSection { nx, ny, spacing: 1.0 },
            initial: InitialSection::Blobs {
                count,
                r_min: 8.0,
                r_max: 11.0,
                seed: 7,
            },
            simulate: SimulateSection {
                times: vec![5.0, 10.0, 20.0, 50.0, 100.0],
            },
            observation: ObservationSection {
                t_min: 0.1,
                t_max: 102.4,
                delta_t: 0.1,
                sigma: 0.01,
                indices: Vec::new(),
                file: None,
            },
            optimizer: OptimizerSection {
                estimate: Estimate::ParameterOnly,
                m_guess: -0.1,
                phi_guess: 0.2,
                guess: Vec::new(),
                cost: Cost::Misfit,
                grad_tol: 1e-8,
                tolerance: Tolerance::Relative,
                max_iters: 500,
                memory: 10,
                armijo_c1: 1e-4,
                backtrack_factor: 0.5,
                max_backtracks: 50,
            },
            uncertainty: UncertaintySection {
                components: Vec::new(),
                rel_tol: 1e-8,
                max_iters: 2000,
                scope: ScopeChoice::Full,
            },
            harness: HarnessSection {
                experiment: 1,
                sweep: SweepVariable::Sigma,
                values: vec![1e-4, 1e-3, 1e-2, 1e-1],
                n_trials,
                fit_window: None,
                snapshot_iteration: 31,
                critical_radius: None,
            },
            verify: VerifySection {
                nx: 8,
                ny: 8,
                n_times: 3,
                zero_observations: false,
                fd_step: 1e-6,
                gradient_tol: 1e-6,
                symmetry_pairs: 20,
                symmetry_tol: 1e-9,
                hvp_fd_tol: 1e-5,
                pair_tol: 1e-12,
                cr_tol: 1e-7,
            },
        }
    }

    /// Parses `text` over the profile defaults and validates the result.
    pub fn parse(text: &str, profile: Profile) -> anyhow::Result<Self> {
        let user: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let mut merged = toml::Table::try_from(Self::defaults(profile)).context("serializing defaults")?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged).try_into().context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Profile) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, profile)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let m = &self.model;
        if !(m.dt > 0.0 && m.tau > 0.0 && m.eps > 0.0) {
            bail!("model.dt, model.tau and model.eps must be positive");
        }
        match m.kind {
            ModelKind::PhaseField => {
                if !(m.m > -0.5 && m.m < 0.5) {
                    bail!("model.m must lie in (-1/2, 1/2), got {}", m.m);
                }
                if self.grid.nx < 3 || self.grid.ny < 3 || !(self.grid.spacing > 0.0) {
                    bail!("grid must be at least 3x3 with positive spacing");
                }
            }
            ModelKind::Linear => {
                if m.dim == 0 || m.matrix.len() != m.dim * m.dim {
                    bail!("linear model needs dim > 0 and a dim*dim matrix");
                }
                if let Some(&i) = self.observation.indices.iter().find(|&&i| i >= m.dim) {
                    bail!("observed index {i} outside the linear state");
                }
            }
        }
        let o = &self.observation;
        if o.file.is_none() && !(o.t_min > 0.0 && o.t_min <= o.t_max && o.delta_t > 0.0 && o.sigma >= 0.0) {
            bail!("observation needs 0 < t_min <= t_max, delta_t > 0 and sigma >= 0");
        }
        let opt = &self.optimizer;
        if !(opt.armijo_c1 > 0.0 && opt.armijo_c1 < 1.0) || !(opt.backtrack_factor > 0.0 && opt.backtrack_factor < 1.0) {
            bail!("optimizer.armijo_c1 and optimizer.backtrack_factor must lie in (0, 1)");
        }
        if !(opt.phi_guess > 0.0 && opt.phi_guess < 1.0) {
            bail!("optimizer.phi_guess must lie in (0, 1)");
        }
        if !(opt.m_guess > -0.5 && opt.m_guess < 0.5) {
            bail!("optimizer.m_guess must lie in (-1/2, 1/2)");
        }
        if self.simulate.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            bail!("simulate.times must be finite and non-negative");
        }
        if !(self.uncertainty.rel_tol > 0.0) {
            bail!("uncertainty.rel_tol must be positive");
        }
        if !matches!(self.harness.experiment, 1..=3) {
            bail!("harness.experiment must be 1, 2 or 3");
        }
        if self.harness.n_trials == 0 {
            bail!("harness.n_trials must be at least 1");
        }
        if self.verify.nx < 3 || self.verify.ny < 3 || !(self.verify.fd_step > 0.0) {
            bail!("verify grid must be at least 3x3 and fd_step positive");
        }
        Ok(())
    }

    pub fn lbfgs(&self) -> LbfgsConfig {
        let o = &self.optimizer;
        LbfgsConfig {
            memory: o.memory,
            grad_tol: o.grad_tol,
            max_iters: o.max_iters,
            armijo_c1: o.armijo_c1,
            backtrack_factor: o.backtrack_factor,
            max_backtracks: o.max_backtracks,
            tolerance_mode: match o.tolerance {
                Tolerance::Relative => ToleranceMode::Relative,
                Tolerance::Absolute => ToleranceMode::Absolute,
            },
            stall_is_termination: true,
        }
    }

    pub fn cr(&self) -> CrConfig {
        CrConfig {
            rel_tol: self.uncertainty.rel_tol,
            max_iters: Some(self.uncertainty.max_iters),
            ..CrConfig::default()
        }
    }

    pub fn cost(&self) -> CostKind {
        match self.optimizer.cost {
            Cost::Misfit => CostKind::Misfit,
            Cost::Full => CostKind::Full,
            Cost::ProfiledFull => CostKind::ProfiledFull,
        }
    }

    /// Harness view of the same settings.
    pub fn twin(&self) -> anyhow::Result<TwinConfig> {
        let truth = match &self.initial {
            InitialSection::Blobs {
                count,
                r_min,
                r_max,
                seed,
            } => TruthSpec::Blobs {
                count: *count,
                r_min: *r_min,
                r_max: *r_max,
                seed: *seed,
            },
            InitialSection::Disks { disks } => TruthSpec::Disks { disks: disks.clone() },
            InitialSection::Uniform { value } => TruthSpec::Field {
                values: vec![*value; self.grid.nx * self.grid.ny],
            },
            InitialSection::Snapshot { path } => {
                let (_, values) = soada::io::read_snapshot(Path::new(path))?;
                TruthSpec::Field { values }
            }
            InitialSection::Values { values } => TruthSpec::Field { values: values.clone() },
        };
        if self.model.kind != ModelKind::PhaseField {
            bail!("twin experiments run on the phase-field model");
        }
        let o = &self.observation;
        Ok(TwinConfig {
            nx: self.grid.nx,
            ny: self.grid.ny,
            spacing: self.grid.spacing,
            tau: self.model.tau,
            eps: self.model.eps,
            dt: self.model.dt,
            m_true: self.model.m,
            truth,
            t_min: o.t_min,
            t_max: o.t_max,
            delta_t: o.delta_t,
            sigma: o.sigma,
            n_trials: self.harness.n_trials,
            seed: self.seed,
            m_guess: self.optimizer.m_guess,
            phi_guess: self.optimizer.phi_guess,
            mode: self.optimizer.estimate.into(),
            grad_tol: self.optimizer.grad_tol,
            absolute_tolerance: self.optimizer.tolerance == Tolerance::Absolute,
            max_iters: self.optimizer.max_iters,
            memory: self.optimizer.memory,
            cr_tol: self.uncertainty.rel_tol,
            cr_max_iters: self.uncertainty.max_iters,
            scope: self.uncertainty.scope,
            fit_window: self.harness.fit_window.map(|[a, b]| (a, b)),
            snapshot_iteration: self.harness.snapshot_iteration,
        })
    }
}

/// Tables whose `kind` selects a variant; switching variant drops the
/// default fields.
const TAGGED: &[&str] = &["initial"];

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        let tagged = TAGGED.contains(&key.as_str());
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                let same_kind = !tagged || u.get("kind").is_none_or(|k| b.get("kind") == Some(k));
                if same_kind {
                    merge(b, u);
                } else {
                    *b = u;
                }
            }
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
