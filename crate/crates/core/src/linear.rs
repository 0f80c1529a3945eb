//! Linear autonomous model `dθ/dt = A θ`, a small test bed with closed-form
//! derivatives.

use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    n: usize,
    /// Row-major `n × n` matrix.
    a: Vec<f64>,
}

impl LinearModel {
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::Dimension {
                expected: n * n,
                got: a.len(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("linear model matrix must be finite".into()));
        }
        Ok(Self { n, a })
    }

    /// `F ≡ 0`: the state is frozen.
    pub fn zero(n: usize) -> Self {
        Self { n, a: vec![0.0; n * n] }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }
}

impl Model for LinearModel {
    fn dim(&self) -> usize {
        self.n
    }

    fn n_param(&self) -> usize {
        0
    }

    fn rhs(&self, theta: &[f64], out: &mut [f64]) {
        self.jvp(theta, theta, out);
    }

    fn jvp(&self, _theta: &[f64], v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.a[i * self.n..(i + 1) * self.n].iter().zip(v).map(|(a, x)| a * x).sum();
        }
    }

    fn vjp(&self, _theta: &[f64], w: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, &wi) in w.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&self.a[i * self.n..(i + 1) * self.n]) {
                *o += a * wi;
            }
        }
    }

    fn soa_term(&self, _theta: &[f64], _lambda: &[f64], _xi: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}
