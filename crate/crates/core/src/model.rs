//! Autonomous-system interface, normalized state vectors and the two
//! variable transforms used by the optimizer.
//!
//! A state vector is laid out as one flat slice, dynamic (field) block
//! first and the time-invariant parameter block last. Everything the
//! optimizer sees lives in the unit box: raw states are mapped onto
//! `(0, 1)` with [`normalize`], and the box constraint is then removed with
//! the logit map [`to_psi`].

use std::ops::Deref;

use crate::error::{Error, Result};

/// Margin used to pull initial guesses sitting exactly on 0 or 1 back into
/// the open unit interval before taking the logit.
pub const EPS_CLAMP: f64 = 1e-12;

/// Lower and upper box bounds, one pair per component.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Invalid(format!(
                    "bounds for component {i} are not an interval: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The same `(lower, upper)` pair for every component.
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// Normalized state `θ`, field block followed by `n_param` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    theta: Vec<f64>,
    n_param: usize,
}

impl StateVector {
    pub fn new(theta: Vec<f64>, n_param: usize) -> Result<Self> {
        if n_param > theta.len() {
            return Err(Error::Invalid(format!(
                "parameter block of {n_param} exceeds state length {}",
                theta.len()
            )));
        }
        Ok(Self { theta, n_param })
    }

    /// Concatenates a field block and a parameter block.
    pub fn from_parts(field: &[f64], params: &[f64]) -> Self {
        let mut theta = Vec::with_capacity(field.len() + params.len());
        theta.extend_from_slice(field);
        theta.extend_from_slice(params);
        Self {
            theta,
            n_param: params.len(),
        }
    }

    pub fn n_state(&self) -> usize {
        self.theta.len() - self.n_param
    }

    pub fn n_param(&self) -> usize {
        self.n_param
    }

    pub fn field(&self) -> &[f64] {
        &self.theta[..self.n_state()]
    }

    pub fn params(&self) -> &[f64] {
        &self.theta[self.n_state()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.theta
    }

    /// Checks `0 < θ_i < 1` for every component.
    pub fn check_open_unit(&self) -> Result<()> {
        for (index, &value) in self.theta.iter().enumerate() {
            if !(value > 0.0 && value < 1.0) {
                return Err(Error::OutOfBounds {
                    index,
                    value,
                    lower: 0.0,
                    upper: 1.0,
                });
            }
        }
        Ok(())
    }
}

impl Deref for StateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.theta
    }
}

/// Unconstrained logit-space variable `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiVector(Vec<f64>);

impl PsiVector {
    pub fn new(psi: Vec<f64>) -> Result<Self> {
        if let Some(i) = psi.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("psi[{i}] is not finite")));
        }
        Ok(Self(psi))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for PsiVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Raised when [`to_psi`] had to pull components into
/// `[EPS_CLAMP, 1 - EPS_CLAMP]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClampWarning {
    pub clamped: usize,
}

/// An autonomous system `dθ/dt = F(θ)` together with the derivative
/// products the adjoint machinery needs.
///
/// All methods overwrite `out`. The last `n_param()` components of `F` must
/// be identically zero, and `jvp`/`vjp` must be exact transposes of each
/// other: `w · jvp(θ, v) == v · vjp(θ, w)`.
pub trait Model: Sync {
    /// Total state length `N`.
    fn dim(&self) -> usize;

    /// Length of the time-invariant parameter block.
    fn n_param(&self) -> usize;

    fn rhs(&self, theta: &[f64], out: &mut [f64]);

    /// `(∂F/∂θ) v`
    fn jvp(&self, theta: &[f64], v: &[f64], out: &mut [f64]);

    /// `(∂F/∂θ)ᵀ w`
    fn vjp(&self, theta: &[f64], w: &[f64], out: &mut [f64]);

    /// `(∂²F/∂θ² · ξ)ᵀ λ`, i.e. component `i` is
    /// `Σ_j Σ_k λ_j ∂²F_j/∂θ_i∂θ_k ξ_k`.
    fn soa_term(&self, theta: &[f64], lambda: &[f64], xi: &[f64], out: &mut [f64]);

    fn n_state(&self) -> usize {
        self.dim() - self.n_param()
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_param(&self) -> usize {
        (**self).n_param()
    }
    fn rhs(&self, theta: &[f64], out: &mut [f64]) {
        (**self).rhs(theta, out)
    }
    fn jvp(&self, theta: &[f64], v: &[f64], out: &mut [f64]) {
        (**self).jvp(theta, v, out)
    }
    fn vjp(&self, theta: &[f64], w: &[f64], out: &mut [f64]) {
        (**self).vjp(theta, w, out)
    }
    fn soa_term(&self, theta: &[f64], lambda: &[f64], xi: &[f64], out: &mut [f64]) {
        (**self).soa_term(theta, lambda, xi, out)
    }
}

/// Maps a raw state inside its bounds onto the unit box.
pub fn normalize(x: &[f64], bounds: &Bounds, n_param: usize) -> Result<StateVector> {
    if x.len() != bounds.len() {
        return Err(Error::Dimension {
            expected: bounds.len(),
            got: x.len(),
        });
    }
    let theta = x
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .enumerate()
        .map(|(index, (&value, (&lower, &upper)))| {
            if value > lower && value < upper {
                Ok((value - lower) / (upper - lower))
            } else {
                Err(Error::OutOfBounds {
                    index,
                    value,
                    lower,
                    upper,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    StateVector::new(theta, n_param)
}

/// Inverse of [`normalize`].
pub fn denormalize(theta: &StateVector, bounds: &Bounds) -> Result<Vec<f64>> {
    if theta.len() != bounds.len() {
        return Err(Error::Dimension {
            expected: bounds.len(),
            got: theta.len(),
        });
    }
    theta.check_open_unit()?;
    Ok(theta
        .iter()
        .zip(bounds.lower.iter().zip(&bounds.upper))
        .map(|(&t, (&lower, &upper))| lower + t * (upper - lower))
        .collect())
}

/// Logit of a single component, `log θ − log(1 − θ)`.
#[inline]
pub fn logit(theta: f64) -> f64 {
    theta.ln() - (-theta).ln_1p()
}

/// Logistic of a single component, saturated so the result stays strictly
/// inside `(0, 1)` even when `exp` under- or overflows.
#[inline]
pub fn logistic(psi: f64) -> f64 {
    const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;
    (1.0 / (1.0 + (-psi).exp())).clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

/// Logit transform into unconstrained space.
///
/// Components outside `[EPS_CLAMP, 1 − EPS_CLAMP]` are clamped first and
/// counted in the returned warning.
pub fn to_psi(theta: &StateVector) -> (PsiVector, Option<ClampWarning>) {
    let mut clamped = 0;
    let psi = theta
        .iter()
        .map(|&t| {
            let c = if t.is_nan() {
                0.5
            } else {
                t.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP)
            };
            if c != t {
                clamped += 1;
            }
            logit(c)
        })
        .collect();
    let warning = (clamped > 0).then_some(ClampWarning { clamped });
    (PsiVector(psi), warning)
}

/// Logistic transform back into the unit box.
pub fn from_psi(psi: &PsiVector, n_param: usize) -> StateVector {
    StateVector {
        theta: psi.iter().map(|&p| logistic(p)).collect(),
        n_param,
    }
}

/// Chain rule `∂J/∂Ψ_i = Θ_i (1 − Θ_i) ∂J/∂Θ_i`.
pub fn grad_theta_to_psi(theta: &[f64], grad_theta: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(grad_theta)
        .map(|(&t, &g)| t * (1.0 - t) * g)
        .collect()
}
