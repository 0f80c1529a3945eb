//! Two-dimensional Kobayashi phase-field model on a periodic grid,
//! `τ ∂φ/∂t = ε² Δφ + φ(1 − φ)(φ + m − 1/2)`, in normalized form with the
//! interface-velocity parameter carried as `b = m + 1/2` in the last state
//! component.
//!
//! Cells are stored row-major, `i = y·nx + x`. The Laplacian is the
//! five-point stencil with periodic wrap.

use crate::error::{Error, Result};
use crate::integrator::{integrate_final, TimeGrid};
use crate::model::{Model, StateVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfGrid {
    nx: usize,
    ny: usize,
    spacing: f64,
}

impl PfGrid {
    pub fn new(nx: usize, ny: usize, spacing: f64) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::Invalid(format!("grid must be at least 3x3, got {nx}x{ny}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Invalid(format!("grid spacing must be positive, got {spacing}")));
        }
        Ok(Self { nx, ny, spacing })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Number of cells `M`.
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.nx + x
    }

    /// The four periodic neighbours of cell `i`.
    pub fn neighbours(&self, i: usize) -> [usize; 4] {
        let (x, y) = (i % self.nx, i / self.nx);
        let xm = if x == 0 { self.nx - 1 } else { x - 1 };
        let xp = if x + 1 == self.nx { 0 } else { x + 1 };
        let ym = if y == 0 { self.ny - 1 } else { y - 1 };
        let yp = if y + 1 == self.ny { 0 } else { y + 1 };
        [self.index(xm, y), self.index(xp, y), self.index(x, ym), self.index(x, yp)]
    }

    /// Calls `f(i, Δ_i u)` for every cell in index order.
    #[inline]
    fn for_each_laplacian(&self, u: &[f64], mut f: impl FnMut(usize, f64)) {
        let (nx, ny) = (self.nx, self.ny);
        let inv_h2 = 1.0 / (self.spacing * self.spacing);
        for y in 0..ny {
            let row = y * nx;
            let up = if y == 0 { (ny - 1) * nx } else { row - nx };
            let down = if y + 1 == ny { 0 } else { row + nx };
            for x in 0..nx {
                let left = if x == 0 { nx - 1 } else { x - 1 };
                let right = if x + 1 == nx { 0 } else { x + 1 };
                let c = u[row + x];
                let sum = u[row + left] + u[row + right] + u[up + x] + u[down + x];
                f(row + x, (sum - 4.0 * c) * inv_h2);
            }
        }
    }

    /// Periodic five-point Laplacian of `u` into `out`.
    pub fn laplacian(&self, u: &[f64], out: &mut [f64]) {
        self.for_each_laplacian(u, |i, lap| out[i] = lap);
    }
}

/// Physical constants and the interface parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfParams {
    pub tau: f64,
    pub eps: f64,
    pub m: f64,
}

impl PfParams {
    pub fn new(tau: f64, eps: f64, m: f64) -> Result<Self> {
        if !(tau > 0.0) || !(eps > 0.0) {
            return Err(Error::Invalid(format!("tau and eps must be positive, got {tau}, {eps}")));
        }
        if !(m > -0.5 && m < 0.5) {
            return Err(Error::Invalid(format!("m must lie in (-1/2, 1/2), got {m}")));
        }
        Ok(Self { tau, eps, m })
    }

    /// Normalized parameter `b = m + 1/2`.
    pub fn b(&self) -> f64 {
        b_from_m(self.m)
    }
}

pub fn b_from_m(m: f64) -> f64 {
    m + 0.5
}

pub fn m_from_b(b: f64) -> f64 {
    b - 0.5
}

/// Reaction term `g(θ, b) = θ(1 − θ)(θ + b − 1)` and its derivatives.
#[inline]
fn reaction(t: f64, b: f64) -> f64 {
    t * (1.0 - t) * (t + b - 1.0)
}

#[inline]
fn reaction_dtheta(t: f64, b: f64) -> f64 {
    -3.0 * t * t + (4.0 - 2.0 * b) * t + b - 1.0
}

#[inline]
fn reaction_db(t: f64) -> f64 {
    t * (1.0 - t)
}

#[inline]
fn reaction_dtheta2(t: f64, b: f64) -> f64 {
    -(6.0 * t + 2.0 * b - 4.0)
}

#[inline]
fn reaction_dtheta_db(t: f64) -> f64 {
    -(2.0 * t - 1.0)
}

/// Phase-field dynamics with state `(φ_1, …, φ_M, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseField {
    grid: PfGrid,
    tau: f64,
    eps: f64,
}

impl PhaseField {
    pub fn new(grid: PfGrid, tau: f64, eps: f64) -> Result<Self> {
        PfParams::new(tau, eps, 0.0)?;
        Ok(Self { grid, tau, eps })
    }

    /// Paper-default units, `τ = ε = 1`.
    pub fn unit(grid: PfGrid) -> Self {
        Self { grid, tau: 1.0, eps: 1.0 }
    }

    pub fn grid(&self) -> &PfGrid {
        &self.grid
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Index of `b` in the state vector.
    pub fn param_index(&self) -> usize {
        self.grid.cells()
    }

    /// Packs a field and `m` into a state vector.
    pub fn state(&self, field: &[f64], m: f64) -> Result<StateVector> {
        if field.len() != self.grid.cells() {
            return Err(Error::Dimension {
                expected: self.grid.cells(),
                got: field.len(),
            });
        }
        Ok(StateVector::from_parts(field, &[b_from_m(m)]))
    }
}

impl Model for PhaseField {
    fn dim(&self) -> usize {
        self.grid.cells() + 1
    }

    fn n_param(&self) -> usize {
        1
    }

    fn rhs(&self, theta: &[f64], out: &mut [f64]) {
        let m = self.grid.cells();
        let (field, b) = (&theta[..m], theta[m]);
        let (e2, inv_tau) = (self.eps * self.eps, 1.0 / self.tau);
        self.grid.for_each_laplacian(field, |i, lap| {
            out[i] = (e2 * lap + reaction(field[i], b)) * inv_tau;
        });
        out[m] = 0.0;
    }

    fn jvp(&self, theta: &[f64], v: &[f64], out: &mut [f64]) {
        let m = self.grid.cells();
        let (field, b, vb) = (&theta[..m], theta[m], v[m]);
        let (e2, inv_tau) = (self.eps * self.eps, 1.0 / self.tau);
        self.grid.for_each_laplacian(&v[..m], |i, lap| {
            let t = field[i];
            out[i] = (e2 * lap + reaction_dtheta(t, b) * v[i] + reaction_db(t) * vb) * inv_tau;
        });
        out[m] = 0.0;
    }

    fn vjp(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        let m = self.grid.cells();
        let (field, b) = (&theta[..m], theta[m]);
        let (e2, inv_tau) = (self.eps * self.eps, 1.0 / self.tau);
        let mut param = 0.0;
        self.grid.for_each_laplacian(&w[..m], |i, lap| {
            let t = field[i];
            out[i] = (e2 * lap + reaction_dtheta(t, b) * w[i]) * inv_tau;
            param += reaction_db(t) * w[i];
        });
        out[m] = param * inv_tau;
    }

    fn soa_term(&self, theta: &[f64], lambda: &[f64], xi: &[f64], out: &mut [f64]) {
        let m = self.grid.cells();
        let (field, b, xb) = (&theta[..m], theta[m], xi[m]);
        let inv_tau = 1.0 / self.tau;
        let mut param = 0.0;
        for i in 0..m {
            let t = field[i];
            let cross = reaction_dtheta_db(t);
            out[i] = lambda[i] * (reaction_dtheta2(t, b) * xi[i] + cross * xb) * inv_tau;
            param += cross * lambda[i] * xi[i];
        }
        out[m] = param * inv_tau;
    }
}

/// Disk-shaped seed of radius `radius` centred at `(cx, cy)` (grid units of
/// length, periodic distance), with the planar travelling-wave profile
/// `½(1 − tanh(d / (2√2 ε)))` across the edge.
pub fn disk_field(grid: &PfGrid, cx: f64, cy: f64, radius: f64, eps: f64) -> Vec<f64> {
    let (lx, ly) = (grid.nx as f64 * grid.spacing, grid.ny as f64 * grid.spacing);
    let width = 2.0 * std::f64::consts::SQRT_2 * eps;
    let mut field = vec![0.0; grid.cells()];
    for y in 0..grid.ny {
        for x in 0..grid.nx {
            let mut dx = (x as f64 * grid.spacing - cx).abs();
            let mut dy = (y as f64 * grid.spacing - cy).abs();
            dx = dx.min(lx - dx);
            dy = dy.min(ly - dy);
            let d = (dx * dx + dy * dy).sqrt() - radius;
            field[grid.index(x, y)] = 0.5 * (1.0 - (d / width).tanh());
        }
    }
    field
}

/// Settings for [`critical_radius`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalRadiusConfig {
    /// Bracket in units of ε; `None` picks `[0.3/m, 2/m]`.
    pub bracket: Option<(f64, f64)>,
    /// Bisection stops when the bracket is narrower than this (units of ε).
    pub tol: f64,
    /// Growth is judged at this time (units of τ).
    pub horizon: f64,
    /// Square grid side as a multiple of the upper bracket.
    pub grid_factor: f64,
    pub dt: f64,
    pub spacing: f64,
    pub tau: f64,
    pub eps: f64,
}

impl Default for CriticalRadiusConfig {
    fn default() -> Self {
        Self {
            bracket: None,
            tol: 0.01,
            horizon: 50.0,
            grid_factor: 8.0,
            dt: 0.1,
            spacing: 1.0,
            tau: 1.0,
            eps: 1.0,
        }
    }
}

/// Whether a centred disk of radius `r0` grows: mean φ at the horizon
/// exceeds the initial mean.
pub fn spot_grows(model: &PhaseField, m: f64, r0: f64, horizon: f64, dt: f64) -> Result<bool> {
    let g = model.grid();
    let (cx, cy) = (0.5 * g.nx as f64 * g.spacing, 0.5 * g.ny as f64 * g.spacing);
    let field = disk_field(g, cx, cy, r0, model.eps());
    let mean0 = mean(&field);
    let theta0 = model.state(&field, m)?;
    let grid = TimeGrid::covering(dt, horizon)?;
    let last = integrate_final(model, &theta0, grid)?;
    Ok(mean(&last[..g.cells()]) > mean0)
}

/// Smallest initial spot radius (units of ε) that grows, by bisection on
/// full 2-D simulations of a circular seed.
pub fn critical_radius(m: f64, cfg: &CriticalRadiusConfig) -> Result<f64> {
    if !(m > 0.0 && m < 0.5) {
        return Err(Error::Invalid(format!("critical radius needs 0 < m < 1/2, got {m}")));
    }
    let (mut lo, mut hi) = cfg.bracket.unwrap_or((0.3 / m, 2.0 / m));
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::NoBracketing { lo, hi });
    }
    let side = ((cfg.grid_factor * hi / cfg.spacing).ceil() as usize).max(16);
    let model = PhaseField::new(PfGrid::new(side, side, cfg.spacing)?, cfg.tau, cfg.eps)?;
    let grows = |r: f64| spot_grows(&model, m, r, cfg.horizon, cfg.dt);
    if grows(lo)? || !grows(hi)? {
        return Err(Error::NoBracketing { lo, hi });
    }
    while hi - lo > cfg.tol {
        let mid = 0.5 * (lo + hi);
        if grows(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{euler_step, integrate};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(model: &PhaseField, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..model.dim()).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct double loop with explicit modular neighbours.
    fn naive_rhs(nx: usize, ny: usize, h: f64, tau: f64, eps: f64, theta: &[f64]) -> Vec<f64> {
        let b = theta[nx * ny];
        let mut out = vec![0.0; nx * ny + 1];
        for y in 0..ny {
            for x in 0..nx {
                let at = |dx: isize, dy: isize| {
                    let xx = (x as isize + dx).rem_euclid(nx as isize) as usize;
                    let yy = (y as isize + dy).rem_euclid(ny as isize) as usize;
                    theta[yy * nx + xx]
                };
                let c = at(0, 0);
                let lap = (at(1, 0) - c + at(-1, 0) - c + at(0, 1) - c + at(0, -1) - c) / (h * h);
                out[y * nx + x] = (eps * eps * lap + c * (1.0 - c) * (c + b - 1.0)) / tau;
            }
        }
        out
    }

    #[test]
    fn grid_validation() {
        assert!(PfGrid::new(2, 5, 1.0).is_err());
        assert!(PfGrid::new(5, 5, 0.0).is_err());
        assert!(PfParams::new(1.0, 1.0, 0.5).is_err());
        assert!((PfParams::new(1.0, 1.0, 0.1).unwrap().b() - 0.6).abs() < 1e-15);
        let g = PfGrid::new(4, 3, 1.0).unwrap();
        assert_eq!(g.neighbours(0), [3, 1, 8, 4]);
    }

    #[test]
    fn zero_field_is_fixed_point() {
        let model = PhaseField::unit(PfGrid::new(6, 5, 1.0).unwrap());
        let theta = model.state(&[0.0; 30], 0.1).unwrap();
        let mut out = vec![1.0; 31];
        model.rhs(&theta, &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_half_field() {
        let model = PhaseField::new(PfGrid::new(5, 4, 1.0).unwrap(), 2.0, 1.0).unwrap();
        let theta = model.state(&[0.5; 20], 0.1).unwrap();
        let mut out = vec![0.0; 21];
        model.rhs(&theta, &mut out);
        for v in &out[..20] {
            assert!((v - 0.25 * 0.1 / 2.0).abs() < 1e-15);
        }
        assert_eq!(out[20], 0.0);
    }

    #[test]
    fn uniform_one_is_unchanged_by_euler() {
        let model = PhaseField::unit(PfGrid::new(5, 5, 1.0).unwrap());
        let theta = model.state(&[1.0; 25], 0.1).unwrap();
        let next = euler_step(&model, &theta, 0.1).unwrap();
        assert_eq!(next, theta);
    }

    #[test]
    fn rhs_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (nx, ny, h, tau, eps) in [(5, 5, 1.0, 1.0, 1.0), (7, 4, 0.7, 1.3, 0.9), (3, 8, 1.2, 0.5, 1.1)] {
            let model = PhaseField::new(PfGrid::new(nx, ny, h).unwrap(), tau, eps).unwrap();
            let theta = random_state(&model, &mut rng);
            let mut out = vec![0.0; model.dim()];
            model.rhs(&theta, &mut out);
            let reference = naive_rhs(nx, ny, h, tau, eps, &theta);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_cell_euler_update() {
        // Interior cell of a 5x5 grid, hand-evaluated update.
        let model = PhaseField::unit(PfGrid::new(5, 5, 1.0).unwrap());
        let mut field = vec![0.0; 25];
        field[12] = 0.6;
        field[11] = 0.2;
        field[13] = 0.4;
        field[7] = 0.1;
        field[17] = 0.9;
        let theta = model.state(&field, 0.1).unwrap();
        let next = euler_step(&model, &theta, 0.1).unwrap();
        let lap = 0.2 + 0.4 + 0.1 + 0.9 - 4.0 * 0.6;
        let expected = 0.6 + 0.1 * (lap + 0.6 * 0.4 * (0.6 + 0.6 - 1.0));
        assert!((next[12] - expected).abs() < 1e-15);
    }

    #[test]
    fn jvp_vjp_adjoint_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = PhaseField::new(PfGrid::new(6, 5, 0.8).unwrap(), 1.4, 0.7).unwrap();
        for _ in 0..20 {
            let theta = random_state(&model, &mut rng);
            let v = random_vec(model.dim(), &mut rng);
            let w = random_vec(model.dim(), &mut rng);
            let mut jv = vec![0.0; model.dim()];
            let mut jw = vec![0.0; model.dim()];
            model.jvp(&theta, &v, &mut jv);
            model.vjp(&theta, &w, &mut jw);
            let norm = dot(&v, &v).sqrt() * dot(&w, &w).sqrt();
            assert!((dot(&w, &jv) - dot(&v, &jw)).abs() <= 1e-12 * norm);
        }
    }

    /// Dense Jacobian by central differences of `rhs`.
    fn fd_jacobian(model: &PhaseField, theta: &[f64]) -> Vec<Vec<f64>> {
        let n = model.dim();
        let h = 1e-6;
        (0..n)
            .map(|j| {
                let mut p = theta.to_vec();
                let mut m = theta.to_vec();
                p[j] += h;
                m[j] -= h;
                let (mut fp, mut fm) = (vec![0.0; n], vec![0.0; n]);
                model.rhs(&p, &mut fp);
                model.rhs(&m, &mut fm);
                fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            })
            .collect()
    }

    #[test]
    fn jvp_and_vjp_match_dense_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = PhaseField::unit(PfGrid::new(4, 4, 1.0).unwrap());
        let theta = random_state(&model, &mut rng);
        let cols = fd_jacobian(&model, &theta);
        let n = model.dim();
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let (mut col, mut row) = (vec![0.0; n], vec![0.0; n]);
            model.jvp(&theta, &e, &mut col);
            model.vjp(&theta, &e, &mut row);
            for i in 0..n {
                assert!((col[i] - cols[j][i]).abs() <= 1e-6, "J[{i},{j}]");
                assert!((row[i] - cols[i][j]).abs() <= 1e-6, "J^T[{i},{j}]");
            }
        }
    }

    #[test]
    fn parameter_column_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = PhaseField::unit(PfGrid::new(4, 3, 1.0).unwrap());
        let theta = random_state(&model, &mut rng);
        let mut e = vec![0.0; 13];
        e[12] = 1.0;
        let mut col = vec![0.0; 13];
        model.jvp(&theta, &e, &mut col);
        for i in 0..12 {
            assert!((col[i] - theta[i] * (1.0 - theta[i])).abs() < 1e-15);
        }
        assert_eq!(col[12], 0.0);
    }

    #[test]
    fn vjp_at_uniform_one() {
        let model = PhaseField::unit(PfGrid::new(4, 4, 1.0).unwrap());
        let theta = model.state(&[1.0; 16], 0.1).unwrap();
        let w: Vec<f64> = (0..17).map(|i| i as f64 * 0.1).collect();
        let mut wu = w.clone();
        wu[..16].fill(0.3);
        let mut out = vec![0.0; 17];
        model.vjp(&theta, &wu, &mut out);
        for v in &out[..16] {
            assert!((v - (-0.6 * 0.3)).abs() < 1e-15);
        }
        assert_eq!(out[16], 0.0);
    }

    #[test]
    fn soa_term_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = PhaseField::new(PfGrid::new(5, 4, 1.0).unwrap(), 1.2, 1.0).unwrap();
        let n = model.dim();
        let theta = random_state(&model, &mut rng);
        let mut out = vec![1.0; n];
        model.soa_term(&theta, &vec![0.0; n], &random_vec(n, &mut rng), &mut out);
        assert!(out.iter().all(|&v| v == 0.0));

        for _ in 0..10 {
            let lambda = random_vec(n, &mut rng);
            let xi = random_vec(n, &mut rng);
            let eta = random_vec(n, &mut rng);
            let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
            model.soa_term(&theta, &lambda, &xi, &mut a);
            model.soa_term(&theta, &lambda, &eta, &mut b);
            let (x, y) = (dot(&eta, &a), dot(&xi, &b));
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));

            let h = 1e-5;
            let shifted = |s: f64| {
                let t: Vec<f64> = theta.iter().zip(&xi).map(|(t, x)| t + s * x).collect();
                let mut o = vec![0.0; n];
                model.vjp(&t, &lambda, &mut o);
                o
            };
            let (p, m) = (shifted(h), shifted(-h));
            let err: f64 = p
                .iter()
                .zip(&m)
                .zip(&a)
                .map(|((p, m), a)| ((p - m) / (2.0 * h) - a).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err / dot(&a, &a).sqrt() < 1e-5);
        }
    }

    #[test]
    fn laplacian_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = PfGrid::new(7, 6, 0.9).unwrap();
        for _ in 0..10 {
            let v = random_vec(g.cells(), &mut rng);
            let w = random_vec(g.cells(), &mut rng);
            let (mut lv, mut lw) = (vec![0.0; g.cells()], vec![0.0; g.cells()]);
            g.laplacian(&v, &mut lv);
            g.laplacian(&w, &mut lw);
            assert!((dot(&w, &lv) - dot(&v, &lw)).abs() < 1e-12 * dot(&v, &v).max(1.0));
            let total: f64 = lv.iter().sum::<f64>() * g.spacing().powi(2);
            assert!(total.abs() < 1e-12);
        }
    }

    #[test]
    fn range_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = PhaseField::unit(PfGrid::new(12, 10, 1.0).unwrap());
        let field: Vec<f64> = (0..120).map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..1.0) } else { 1.0 }).collect();
        let traj = integrate(&model, &model.state(&field, 0.3).unwrap(), TimeGrid::new(0.1, 1000).unwrap()).unwrap();
        for s in traj.iter() {
            assert!(s[..120].iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = PfGrid::new(6, 5, 1.0).unwrap();
        let model = PhaseField::unit(g);
        let field: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let shift = |f: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; 30];
            for y in 0..5 {
                for x in 0..6 {
                    out[g.index((x + 1) % 6, y)] = f[g.index(x, y)];
                }
            }
            out
        };
        let grid = TimeGrid::new(0.1, 50).unwrap();
        let a = integrate(&model, &model.state(&field, 0.1).unwrap(), grid).unwrap();
        let b = integrate(&model, &model.state(&shift(&field), 0.1).unwrap(), grid).unwrap();
        for k in 0..a.len() {
            assert_eq!(shift(a.field(k)), b.field(k));
        }
    }

    #[test]
    fn large_spot_grows_small_spot_decays() {
        let model = PhaseField::unit(PfGrid::new(64, 64, 1.0).unwrap());
        assert!(spot_grows(&model, 0.1, 14.0, 50.0, 0.1).unwrap());
        assert!(!spot_grows(&model, 0.1, 3.0, 50.0, 0.1).unwrap());
    }

    #[test]
    fn critical_radius_rejects_bad_bracket() {
        let cfg = CriticalRadiusConfig {
            bracket: Some((10.0, 12.0)),
            ..Default::default()
        };
        assert!(matches!(critical_radius(0.1, &cfg), Err(Error::NoBracketing { .. })));
        assert!(critical_radius(0.0, &CriticalRadiusConfig::default()).is_err());
    }
}
