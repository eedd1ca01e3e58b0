//! Adam with bias correction.

use thiserror::Error;

use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient at coordinate {0}")]
    NonFiniteGradient(usize),
    #[error("parameter {0} became non-finite")]
    NonFiniteParameter(usize),
    #[error("state holds {state} entries but {params} parameters were given")]
    ShapeMismatch { state: usize, params: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Moments are kept in `f64` whatever the parameter type.
    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: f64) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::ShapeMismatch {
                state: self.m.len(),
                params: params.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.f64().is_finite()) {
            return Err(OptimError::NonFiniteGradient(i));
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.f64();
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPSILON);
            if update != 0.0 {
                *p = T::of(p.f64() - update);
            }
            if !p.f64().is_finite() {
                return Err(OptimError::NonFiniteParameter(i));
            }
        }
        Ok(())
    }
}
