//! Derivative and solver self-checks on a small instance of the configured
//! model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use soada::observation::make_synthetic;
use soada::optimize::{conjugate_residual, CrConfig};
use soada::phasefield::b_from_m;
use soada::{
    gradient, integrate, Linearization, Model, ObservationSeries, PfGrid, PhaseField, Problem, Projection,
    StateVector, TimeGrid,
};

use crate::config::{ModelKind, RunConfig};
use crate::output::Outputs;
use crate::Failure;

/// Deliberate defects for exercising the checks themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Perturbs the transposed Jacobian product.
    CorruptVjp,
}

struct CorruptVjp<'a>(&'a dyn Model);

impl Model for CorruptVjp<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn n_param(&self) -> usize {
        self.0.n_param()
    }
    fn rhs(&self, theta: &[f64], out: &mut [f64]) {
        self.0.rhs(theta, out)
    }
    fn jvp(&self, theta: &[f64], v: &[f64], out: &mut [f64]) {
        self.0.jvp(theta, v, out)
    }
    fn vjp(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        self.0.vjp(theta, w, out);
        let n = out.len();
        out[n - 1] += 1e-3 * w[0];
    }
    fn soa_term(&self, theta: &[f64], lambda: &[f64], xi: &[f64], out: &mut [f64]) {
        self.0.soa_term(theta, lambda, xi, out)
    }
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    skipped: bool,
    worst_error: f64,
    tolerance: f64,
    samples: usize,
}

impl Check {
    fn new(name: &'static str, errors: &[f64], tolerance: f64) -> Self {
        let worst = errors.iter().copied().fold(0.0, f64::max);
        Self {
            name,
            // NaN never passes.
            passed: errors.iter().all(|e| *e < tolerance),
            skipped: false,
            worst_error: worst,
            tolerance,
            samples: errors.len(),
        }
    }

    fn skipped(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            passed: true,
            skipped: true,
            worst_error: 0.0,
            tolerance,
            samples: 0,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random interior state with the configured parameter block.
fn random_state(rng: &mut ChaCha8Rng, n_field: usize, params: &[f64]) -> StateVector {
    let field: Vec<f64> = (0..n_field).map(|_| rng.random_range(0.05..0.95)).collect();
    StateVector::from_parts(&field, params)
}

/// Gradient components below this magnitude are compared absolutely.
const FD_FLOOR: f64 = 1e-2;

pub fn run(cfg: &RunConfig, fault: Option<Fault>, out: &mut Outputs) -> anyhow::Result<()> {
    let v = &cfg.verify;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dt = cfg.model.dt;

    let pf;
    let linear;
    let (base, params): (&dyn Model, Vec<f64>) = match cfg.model.kind {
        ModelKind::PhaseField => {
            let grid = PfGrid::new(v.nx, v.ny, cfg.grid.spacing)?;
            pf = PhaseField::new(grid, cfg.model.tau, cfg.model.eps)?;
            (&pf, vec![b_from_m(cfg.model.m)])
        }
        ModelKind::Linear => {
            linear = soada::linear::LinearModel::new(cfg.model.dim, cfg.model.matrix.clone())
                .map_err(|e| Failure::Config(e.into()))?;
            (&linear, Vec::new())
        }
    };
    let corrupt = CorruptVjp(base);
    let model: &dyn Model = match fault {
        Some(Fault::CorruptVjp) => &corrupt,
        None => base,
    };
    let n = model.dim();
    let n_field = model.n_state();
    let indices: Vec<usize> = match cfg.model.kind {
        ModelKind::Linear if !cfg.observation.indices.is_empty() => cfg.observation.indices.clone(),
        _ => (0..n_field).collect(),
    };
    let op = Projection::new(n, indices)?;

    let theta0 = random_state(&mut rng, n_field, &params);
    let stride = 4;
    let n_steps = stride * v.n_times.max(1);
    let grid = TimeGrid::new(dt, n_steps)?;
    let obs = if v.zero_observations {
        ObservationSeries::empty(0.01)
    } else {
        let truth = random_state(&mut rng, n_field, &params);
        let traj = integrate(base, &truth, grid)?;
        let times: Vec<f64> = (1..=v.n_times).map(|i| grid.time(i * stride)).collect();
        make_synthetic(&traj, &op, &times, 0.01, cfg.seed)?
    };
    let problem = Problem::new(model, &op, &obs, grid)?.with_cost(cfg.cost());
    let mut checks = Vec::new();

    // Transpose identity of the linearized right-hand side.
    let mut errs = Vec::new();
    let (mut jv, mut jtw) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..20 {
        let theta = random_state(&mut rng, n_field, &params);
        let (x, w) = (normal_vec(&mut rng, n), normal_vec(&mut rng, n));
        model.jvp(&theta, &x, &mut jv);
        model.vjp(&theta, &w, &mut jtw);
        errs.push(rel(dot(&w, &jv), dot(&x, &jtw)));
    }
    checks.push(Check::new("adjoint-pair", &errs, v.pair_tol));

    let g = gradient(&problem, &theta0)?;
    let h = v.fd_step;
    let mut errs = Vec::with_capacity(n);
    for i in 0..n {
        let mut t = theta0.clone();
        t.as_mut_slice()[i] += h;
        let jp = problem.cost(&t)?;
        t.as_mut_slice()[i] -= 2.0 * h;
        let fd = (jp - problem.cost(&t)?) / (2.0 * h);
        let scale = fd.abs().max(g.grad_theta[i].abs()).max(FD_FLOOR);
        errs.push((g.grad_theta[i] - fd).abs() / scale);
    }
    checks.push(Check::new("gradient-fd", &errs, v.gradient_tol));

    if v.zero_observations {
        let worst = g.grad_theta.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        checks.push(Check::new("zero-observation-gradient", &[worst], 1e-10));
    }

    let lin = Linearization::new(problem, &theta0)?;
    let mut errs = Vec::new();
    for _ in 0..v.symmetry_pairs {
        let (a, b) = (normal_vec(&mut rng, n), normal_vec(&mut rng, n));
        errs.push(rel(dot(&a, &lin.apply(&b)?), dot(&b, &lin.apply(&a)?)));
    }
    checks.push(Check::new("hvp-symmetry", &errs, v.symmetry_tol));

    let eps = 1e-5;
    let mut errs = Vec::new();
    for _ in 0..3 {
        let gamma = normal_vec(&mut rng, n);
        let hg = lin.apply(&gamma)?;
        let shifted = |sign: f64| -> anyhow::Result<Vec<f64>> {
            let mut t = theta0.clone();
            for (x, d) in t.as_mut_slice().iter_mut().zip(&gamma) {
                *x += sign * eps * d;
            }
            Ok(gradient(&problem, &t)?.grad_theta)
        };
        let (gp, gm) = (shifted(1.0)?, shifted(-1.0)?);
        let diff: Vec<f64> = (0..n).map(|i| hg[i] - (gp[i] - gm[i]) / (2.0 * eps)).collect();
        let scale = norm(&hg);
        errs.push(if scale == 0.0 { norm(&diff) } else { norm(&diff) / scale });
    }
    checks.push(Check::new("hvp-fd", &errs, v.hvp_fd_tol));

    if obs.is_empty() {
        checks.push(Check::skipped("cr-dense", v.cr_tol));
    } else {
        let mut dense = DMatrix::<f64>::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            dense.set_column(j, &DVector::from_vec(lin.apply(&e)?));
            e[j] = 0.0;
        }
        let q = normal_vec(&mut rng, n);
        let reference = dense
            .clone()
            .lu()
            .solve(&DVector::from_column_slice(&q))
            .ok_or_else(|| anyhow::anyhow!("dense Hessian is singular"))?;
        let mut ws = lin.workspace();
        let cr_cfg = CrConfig {
            rel_tol: 1e-13,
            max_iters: Some(50 * n),
            ..CrConfig::default()
        };
        let sol = conjugate_residual(|x, y| lin.apply_into(&mut ws, x, y), &q, &cr_cfg)?;
        let diff: Vec<f64> = sol.solution.iter().zip(reference.iter()).map(|(a, b)| a - b).collect();
        checks.push(Check::new("cr-dense", &[norm(&diff) / reference.norm()], v.cr_tol));
    }

    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        let status = match (c.skipped, c.passed) {
            (true, _) => "SKIP",
            (false, true) => "PASS",
            (false, false) => "FAIL",
        };
        println!("{status} {:<26} worst {:.3e} (tol {:.1e}, {} samples)", c.name, c.worst_error, c.tolerance, c.samples);
    }
    out.write_json("report.json", &checks)?;
    if failed > 0 {
        return Err(Failure::Verify(failed).into());
    }
    Ok(())
}
