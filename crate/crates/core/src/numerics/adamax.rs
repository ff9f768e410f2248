//! Adamax: Adam with an infinity-norm second moment.
//!
//! ```text
//! m ← β1·m + (1−β1)·g
//! u ← max(β2·u, |g|)
//! θ ← θ − (lr / (1−β1^t)) · m / (u + ε)
//! ```
//!
//! Each parameter carries its own step counter, so a block unfrozen halfway
//! through training starts with a correctly bias-corrected first step.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::graph::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamaxState {
    pub m: Matrix,
    pub u: Matrix,
    pub t: u64,
    pub config: AdamaxConfig,
}

impl AdamaxState {
    pub fn new(shape: (usize, usize), config: AdamaxConfig) -> Self {
        Self {
            m: Matrix::zeros(shape),
            u: Matrix::zeros(shape),
            t: 0,
            config,
        }
    }
}

/// One Adamax update of `params` in place.
pub fn adamax_step(
    params: &mut Matrix,
    grads: &Matrix,
    state: &mut AdamaxState,
    lr: f64,
) -> Result<()> {
    if params.dim() != grads.dim() || params.dim() != state.m.dim() {
        return Err(Error::Dimension(format!(
            "adamax: params {:?}, grads {:?}, state {:?}",
            params.dim(),
            grads.dim(),
            state.m.dim()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let AdamaxConfig { beta1, beta2, eps } = state.config;
    if eps <= 0.0 {
        return Err(Error::Config("adamax eps must be positive".into()));
    }
    state.t += 1;
    let step = lr / (1.0 - beta1.powi(state.t as i32));
    Zip::from(params)
        .and(grads)
        .and(&mut state.m)
        .and(&mut state.u)
        .for_each(|theta, &g, m, u| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *u = (beta2 * *u).max(g.abs());
            *theta -= step * *m / (*u + eps);
        });
    Ok(())
}

/// Adamax over every parameter of a [`ParamStore`], with a learning rate per
/// parameter. Frozen parameters are skipped and their state left untouched.
#[derive(Clone, Debug)]
pub struct Adamax {
    config: AdamaxConfig,
    states: Vec<Option<AdamaxState>>,
    lrs: Vec<f64>,
}

impl Adamax {
    pub fn new(store: &ParamStore, lr: f64, config: AdamaxConfig) -> Self {
        Self {
            config,
            states: vec![None; store.len()],
            lrs: vec![lr; store.len()],
        }
    }

    pub fn set_lr(&mut self, id: super::params::ParamId, lr: f64) {
        self.lrs[id.0] = lr;
    }

    pub fn lr(&self, id: super::params::ParamId) -> f64 {
        self.lrs[id.0]
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let state = self.states[id.0]
                .get_or_insert_with(|| AdamaxState::new(p.value.dim(), self.config));
            adamax_step(&mut p.value, &p.grad, state, self.lrs[id.0])
                .map_err(|e| match e {
                    Error::Dimension(m) => Error::Dimension(format!("{}: {m}", p.name)),
                    other => other,
                })?;
            if !p.value.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("adamax update of {}", p.name)));
            }
        }
        Ok(())
    }

    pub fn steps_taken(&self, id: super::params::ParamId) -> u64 {
        self.states[id.0].as_ref().map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = array![[1.0, -2.0, 3.5]];
        let before = p.clone();
        let mut s = AdamaxState::new((1, 3), AdamaxConfig::default());
        adamax_step(&mut p, &Matrix::zeros((1, 3)), &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    // Scalar re-implementation, written independently of the vectorized path.
    fn scalar_adamax(theta0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut theta, mut m, mut u) = (theta0, 0.0f64, 0.0f64);
        for t in 1..=steps {
            let g = 2.0 * theta;
            m = b1 * m + (1.0 - b1) * g;
            u = f64::max(b2 * u, g.abs());
            theta -= lr / (1.0 - b1.powi(t as i32)) * m / (u + eps);
        }
        theta
    }

    #[test]
    fn three_steps_on_quadratic_match_scalar_reference() {
        let mut p = array![[1.0]];
        let mut s = AdamaxState::new((1, 1), AdamaxConfig::default());
        for _ in 0..3 {
            let g = &p * 2.0;
            adamax_step(&mut p, &g, &mut s, 0.1).unwrap();
        }
        let want = scalar_adamax(1.0, 0.1, 3);
        assert!((p[[0, 0]] - want).abs() < 1e-12);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn u_is_nonnegative_and_tracks_decayed_max() {
        let mut p = array![[0.0, 0.0]];
        let mut s = AdamaxState::new((1, 2), AdamaxConfig::default());
        let grads = [array![[3.0, -1.0]], array![[0.5, -4.0]], array![[0.0, 0.0]]];
        let mut prev = s.u.clone();
        for g in &grads {
            adamax_step(&mut p, g, &mut s, 0.01).unwrap();
            for ((&u, &pu), &gi) in s.u.iter().zip(prev.iter()).zip(g.iter()) {
                assert!(u >= 0.0);
                assert!(u >= gi.abs());
                assert!(u >= 0.999 * pu);
            }
            prev = s.u.clone();
        }
    }

    #[test]
    fn rejects_bad_shapes_and_lr() {
        let mut p = Matrix::zeros((1, 2));
        let mut s = AdamaxState::new((1, 2), AdamaxConfig::default());
        assert!(adamax_step(&mut p, &Matrix::zeros((2, 1)), &mut s, 0.1).is_err());
        assert!(adamax_step(&mut p, &Matrix::zeros((1, 2)), &mut s, 0.0).is_err());
    }
}
