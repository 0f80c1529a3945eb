//! Explicit-Euler forward integration with full or checkpointed storage.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::model::{Model, StateVector};

/// Uniform Euler grid `t_k = k·dt`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { dt, n_steps })
    }

    /// Smallest grid reaching `t_f` exactly (`t_f` must be a multiple of `dt`).
    pub fn covering(dt: f64, t_f: f64) -> Result<Self> {
        let grid = Self::new(dt, 0)?;
        let n_steps = grid.step_of(t_f)?;
        Ok(Self { dt, n_steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn t_f(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// Same `dt`, `extra` more steps.
    pub fn extended(&self, extra: usize) -> Self {
        Self {
            dt: self.dt,
            n_steps: self.n_steps + extra,
        }
    }

    /// Step index of time `t`; `t` has to sit on the grid to within a
    /// relative `1e-9`. The upper end of the grid is not checked.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::TimeOutOfRange {
                time: t,
                t_f: self.t_f(),
            });
        }
        let k = (t / self.dt).round();
        if (k * self.dt - t).abs() > 1e-9 * t.max(self.dt) {
            return Err(Error::NotOnGrid {
                time: t,
                dt: self.dt,
            });
        }
        Ok(k as usize)
    }
}

/// `θ + dt·F(θ)` written into `out`; `scratch` receives `F(θ)`.
#[inline]
pub fn euler_step_into<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    dt: f64,
    scratch: &mut [f64],
    out: &mut [f64],
) {
    model.rhs(theta, scratch);
    for ((o, &t), &f) in out.iter_mut().zip(theta).zip(scratch.iter()) {
        *o = t + dt * f;
    }
}

/// One explicit Euler step.
pub fn euler_step<M: Model + ?Sized>(model: &M, theta: &StateVector, dt: f64) -> Result<StateVector> {
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
    }
    let n = theta.len();
    let mut scratch = vec![0.0; n];
    let mut out = vec![0.0; n];
    euler_step_into(model, theta, dt, &mut scratch, &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { step: 1 });
    }
    StateVector::new(out, theta.n_param())
}

/// Read access to the states of a forward run, in any order.
pub trait StateSource {
    fn grid(&self) -> TimeGrid;
    fn dim(&self) -> usize;
    /// Copies state `step` into `out`.
    fn load(&self, step: usize, out: &mut [f64]);
}

/// Fully stored forward trajectory, one state per grid index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    n_param: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub(crate) fn from_raw(grid: TimeGrid, dim: usize, n_param: usize, states: Vec<f64>) -> Self {
        debug_assert_eq!(states.len(), dim * (grid.n_steps() + 1));
        Self {
            grid,
            dim,
            n_param,
            states,
        }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_param(&self) -> usize {
        self.n_param
    }

    /// Number of stored states, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.states.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, step: usize) -> &[f64] {
        &self.states[step * self.dim..(step + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Field block of state `step`.
    pub fn field(&self, step: usize) -> &[f64] {
        &self.state(step)[..self.dim - self.n_param]
    }

    pub fn state_vector(&self, step: usize) -> StateVector {
        StateVector::new(self.state(step).to_vec(), self.n_param).expect("layout checked on construction")
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim.max(1))
    }
}

impl StateSource for Trajectory {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn load(&self, step: usize, out: &mut [f64]) {
        out.copy_from_slice(self.state(step));
    }
}

fn check_start<M: Model + ?Sized>(model: &M, theta0: &StateVector) -> Result<()> {
    if theta0.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: theta0.len(),
        });
    }
    if theta0.n_param() != model.n_param() {
        return Err(Error::Invalid(format!(
            "state carries {} parameters, model expects {}",
            theta0.n_param(),
            model.n_param()
        )));
    }
    if theta0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { step: 0 });
    }
    Ok(())
}

/// Integrates from `theta0` over `grid`, storing every state.
pub fn integrate<M: Model + ?Sized>(model: &M, theta0: &StateVector, grid: TimeGrid) -> Result<Trajectory> {
    check_start(model, theta0)?;
    let n = model.dim();
    let mut states = Vec::with_capacity(n * (grid.n_steps() + 1));
    states.extend_from_slice(theta0);
    let mut scratch = vec![0.0; n];
    let mut next = vec![0.0; n];
    for step in 1..=grid.n_steps() {
        let prev = &states[(step - 1) * n..step * n];
        euler_step_into(model, prev, grid.dt(), &mut scratch, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        states.extend_from_slice(&next);
    }
    Ok(Trajectory {
        grid,
        dim: n,
        n_param: theta0.n_param(),
        states,
    })
}

/// Final state only, without storing the trajectory.
pub fn integrate_final<M: Model + ?Sized>(model: &M, theta0: &StateVector, grid: TimeGrid) -> Result<Vec<f64>> {
    check_start(model, theta0)?;
    let n = model.dim();
    let mut cur = theta0.to_vec();
    let mut next = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for step in 1..=grid.n_steps() {
        euler_step_into(model, &cur, grid.dt(), &mut scratch, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step });
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Forward run that keeps every `stride`-th state and recomputes the rest
/// on demand from the nearest checkpoint at or before the requested step.
///
/// The most recently recomputed segment is cached, so a backward sweep
/// costs one extra forward integration in total.
pub struct CheckpointedTrajectory<'m, M: Model + ?Sized> {
    model: &'m M,
    grid: TimeGrid,
    stride: usize,
    checkpoints: Vec<Vec<f64>>,
    cache: RefCell<SegmentCache>,
}

struct SegmentCache {
    segment: Option<usize>,
    states: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'m, M: Model + ?Sized> CheckpointedTrajectory<'m, M> {
    pub fn new(model: &'m M, theta0: &StateVector, grid: TimeGrid, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Invalid("checkpoint stride must be at least 1".into()));
        }
        check_start(model, theta0)?;
        let n = model.dim();
        let mut checkpoints = vec![theta0.to_vec()];
        let mut cur = theta0.to_vec();
        let mut next = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for step in 1..=grid.n_steps() {
            euler_step_into(model, &cur, grid.dt(), &mut scratch, &mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { step });
            }
            std::mem::swap(&mut cur, &mut next);
            if step % stride == 0 {
                checkpoints.push(cur.clone());
            }
        }
        Ok(Self {
            model,
            grid,
            stride,
            checkpoints,
            cache: RefCell::new(SegmentCache {
                segment: None,
                states: vec![0.0; n * stride],
                scratch: vec![0.0; n],
            }),
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Number of states held permanently.
    pub fn stored_states(&self) -> usize {
        self.checkpoints.len()
    }
}

impl<M: Model + ?Sized> StateSource for CheckpointedTrajectory<'_, M> {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn load(&self, step: usize, out: &mut [f64]) {
        assert!(step <= self.grid.n_steps(), "step {step} beyond grid");
        let n = self.model.dim();
        let segment = step / self.stride;
        let offset = step % self.stride;
        if offset == 0 {
            out.copy_from_slice(&self.checkpoints[segment]);
            return;
        }
        let mut cache = self.cache.borrow_mut();
        if cache.segment != Some(segment) {
            let SegmentCache { states, scratch, .. } = &mut *cache;
            states[..n].copy_from_slice(&self.checkpoints[segment]);
            let last = (self.stride - 1).min(self.grid.n_steps() - segment * self.stride);
            for j in 1..=last {
                let (head, tail) = states.split_at_mut(j * n);
                euler_step_into(self.model, &head[(j - 1) * n..], self.grid.dt(), scratch, &mut tail[..n]);
            }
            cache.segment = Some(segment);
        }
        out.copy_from_slice(&cache.states[offset * n..(offset + 1) * n]);
    }
}
