//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        default_hyperparams()
    }
}

/// `lr = 0.1`, `beta1 = 0.1`, `beta2 = 0.999`, `eps = 1e-8`.
pub fn default_hyperparams() -> AdamConfig {
    AdamConfig { lr: 0.1, beta1: 0.1, beta2: 0.999, eps: 1e-8 }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bail!(InvalidArgument, "adam lr must be finite and >= 0, got {}", self.lr);
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bail!(InvalidArgument, "adam {name} must lie in [0, 1), got {b}");
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            bail!(InvalidArgument, "adam eps must be finite and > 0, got {}", self.eps);
        }
        Ok(())
    }
}

/// Moment accumulators shaped like the parameter arrays they update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, t: 0, m: Vec::new(), v: Vec::new() })
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// `θ ← θ − lr · m̂ / (√v̂ + eps)` on every array. Moments are allocated
    /// on the first call and fix the expected shapes thereafter.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            bail!(Shape, "adam: parameter and gradient arrays differ in shape");
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            bail!(NonFinite, "adam gradients");
        }
        if self.t == 0 {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            bail!(Shape, "adam: parameter shapes changed between steps");
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_once(config: AdamConfig, theta: &mut [f64], g: &[f64]) -> AdamState {
        let mut s = AdamState::new(config).unwrap();
        s.step(&mut [theta], &[g]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let mut theta = vec![0.5, -2.0, 3.0];
        let s = step_once(default_hyperparams(), &mut theta, &[0.0; 3]);
        assert_eq!(theta, vec![0.5, -2.0, 3.0]);
        assert_eq!(s.t(), 1);
    }

    #[test]
    fn first_step_is_sign_times_lr() {
        let cfg = default_hyperparams();
        let g = [4.0, -0.25, 1e-3];
        let mut theta = vec![0.0; 3];
        step_once(cfg, &mut theta, &g);
        for (th, gi) in theta.iter().zip(g) {
            // m̂ = g and v̂ = g² after one step
            let expect = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((th - expect).abs() < 1e-15, "{th} vs {expect}");
            assert!((th + cfg.lr * gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_betas_collapse_to_normalized_gradient() {
        let cfg = AdamConfig { lr: 0.3, beta1: 0.0, beta2: 0.0, eps: 1e-8 };
        let mut s = AdamState::new(cfg).unwrap();
        let mut theta = vec![1.0, 1.0];
        for g in [[2.0, -3.0], [-0.5, 0.0]] {
            let before = theta.clone();
            s.step(&mut [&mut theta], &[&g]).unwrap();
            for i in 0..2 {
                assert_eq!(theta[i], before[i] - 0.3 * g[i] / (g[i].abs() + 1e-8));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(AdamState::new(AdamConfig { beta1: 1.0, ..default_hyperparams() }).is_err());
        assert!(AdamState::new(AdamConfig { eps: 0.0, ..default_hyperparams() }).is_err());
        let mut s = AdamState::new(default_hyperparams()).unwrap();
        let mut theta = vec![0.0; 2];
        assert!(s.step(&mut [&mut theta], &[&[1.0]]).is_err());
        assert!(s.step(&mut [&mut theta], &[&[1.0, f64::NAN]]).is_err());
    }

    /// Cauchy–Schwarz on the two moment sums gives
    /// `|m̂|/√v̂ ≤ (1−β₁)/(1−β₁ᵗ) · √((1−β₂ᵗ)/(1−β₂) · Σ_{k<t} (β₁²/β₂)ᵏ)`.
    fn step_bound(cfg: AdamConfig, t: i32) -> f64 {
        let r = cfg.beta1 * cfg.beta1 / cfg.beta2;
        let geometric: f64 = (0..t).map(|k| r.powi(k)).sum();
        cfg.lr * (1.0 - cfg.beta1) / (1.0 - cfg.beta1.powi(t))
            * ((1.0 - cfg.beta2.powi(t)) / (1.0 - cfg.beta2) * geometric).sqrt()
    }

    proptest! {
        #[test]
        fn update_obeys_moment_bound(grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..40)) {
            let cfg = default_hyperparams();
            let mut s = AdamState::new(cfg).unwrap();
            let mut theta = vec![0.0; 4];
            for (t, g) in grads.iter().enumerate() {
                let before = theta.clone();
                s.step(&mut [&mut theta], &[g]).unwrap();
                let bound = step_bound(cfg, t as i32 + 1) * (1.0 + 1e-12);
                for i in 0..4 {
                    prop_assert!((theta[i] - before[i]).abs() <= bound);
                }
            }
        }

        #[test]
        fn comparable_gradients_move_less_than_two_lr(
            grads in prop::collection::vec(prop::collection::vec((0.5f64..1.0, any::<bool>()), 4), 1..40),
            scale in 1e-3f64..1e3,
        ) {
            let cfg = default_hyperparams();
            let mut s = AdamState::new(cfg).unwrap();
            let mut theta = vec![0.0; 4];
            for g in &grads {
                let g: Vec<f64> = g.iter().map(|&(a, neg)| if neg { -a * scale } else { a * scale }).collect();
                let before = theta.clone();
                s.step(&mut [&mut theta], &[&g]).unwrap();
                for i in 0..4 {
                    prop_assert!((theta[i] - before[i]).abs() < 2.0 * cfg.lr);
                }
            }
        }

        #[test]
        fn zero_betas_never_climb(g in prop::collection::vec(-1e3f64..1e3, 1..8)) {
            let mut theta = vec![0.0; g.len()];
            step_once(AdamConfig { lr: 0.1, beta1: 0.0, beta2: 0.0, eps: 1e-8 }, &mut theta, &g);
            for (th, gi) in theta.iter().zip(&g) {
                prop_assert!(th * gi <= 0.0);
            }
        }
    }
}
