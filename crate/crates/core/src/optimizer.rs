//! Adam/AdamW with bias correction, the cosine learning-rate schedule with
//! optional linear warmup, and the post-step renormalization that keeps the
//! normalized variant's parameters on the hypersphere.
//!
//! The betas (0.9, 0.95) and epsilon 1e-8 are the de-facto GPT-training
//! values; every run's effective config echoes them.

use crate::hypersphere::normalize_embedding_dim_in_place;
use crate::model::{ModelConfig, ModelParams, Variant};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Accumulated parameter gradients keyed by canonical name.
pub type GradStore = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    NonFiniteGradient { param: String },
    WrongVariant { expected: Variant, got: Variant },
    DegenerateParam { param: String },
    InvalidConfig(String),
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter '{param}'")
            }
            Self::WrongVariant { expected, got } => {
                write!(f, "operation requires the {expected} variant, got {got}")
            }
            Self::DegenerateParam { param } => {
                write!(f, "degenerate vector while normalizing parameter '{param}'")
            }
            Self::InvalidConfig(msg) => write!(f, "invalid optimizer config: {msg}"),
        }
    }
}

impl std::error::Error for OptimError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    /// Variant defaults: the baseline trains with 2000 warmup steps and
    /// weight decay 0.1; the normalized variant drops both.
    pub fn for_variant(variant: Variant, lr0: f64, total_steps: usize) -> Self {
        let (warmup_steps, weight_decay) = match variant {
            Variant::Gpt => (2000.min(total_steps), 0.1),
            Variant::Ngpt => (0, 0.0),
        };
        Self { lr0, total_steps, warmup_steps, weight_decay, beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.warmup_steps > self.total_steps {
            return Err(OptimError::InvalidConfig(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to lr0 over `warmup_steps`, then cosine annealing to
/// exactly 0 at `total_steps`. With zero warmup the schedule starts at lr0.
pub fn lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr0 * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return 0.0;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update on a single tensor. Exposed for the scalar oracle tests;
/// [`adam_step`] drives it across the whole parameter set.
#[allow(clippy::too_many_arguments)]
pub fn adam_update_tensor(
    theta: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    cfg: &OptimConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad.data()[i];
        let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        theta.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        if decay && cfg.weight_decay > 0.0 {
            theta.data_mut()[i] -= lr * cfg.weight_decay * theta.data()[i];
        }
    }
}

/// Adam over every trainable parameter. Gradients are validated first, so a
/// non-finite gradient aborts before any parameter moves.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradStore,
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<(), OptimError> {
    let mut bad: Option<String> = None;
    params.visit(&mut |name, meta, _| {
        if bad.is_some() || !meta.trainable {
            return;
        }
        if let Some(g) = grads.get(name) {
            if !g.all_finite() {
                bad = Some(name.to_string());
            }
        }
    });
    if let Some(param) = bad {
        return Err(OptimError::NonFiniteGradient { param });
    }

    state.step += 1;
    let t = state.step;
    let AdamState { m, v, .. } = state;
    params.visit_mut(&mut |name, meta, theta| {
        if !meta.trainable {
            return;
        }
        let Some(g) = grads.get(name) else { return };
        let m = m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        let v = v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        adam_update_tensor(theta, g, m, v, t, lr, cfg, meta.decay);
    });
    Ok(())
}

/// Renormalize all nine matrix groups along their embedding dimension, in
/// the canonical storage the optimizer reads next step. Normalized-variant
/// only; scaling factors and eigen learning rates are untouched.
pub fn post_step_normalize(
    params: &mut ModelParams,
    cfg: &ModelConfig,
) -> Result<(), OptimError> {
    if cfg.variant != Variant::Ngpt {
        return Err(OptimError::WrongVariant { expected: Variant::Ngpt, got: cfg.variant });
    }
    let mut bad: Option<String> = None;
    params.visit_mut(&mut |name, meta, t| {
        if bad.is_some() {
            return;
        }
        if let Some(axis) = meta.normalize {
            if normalize_embedding_dim_in_place(t, axis).is_err() {
                bad = Some(name.to_string());
            }
        }
    });
    match bad {
        Some(param) => Err(OptimError::DegenerateParam { param }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::numerics::{randn, Rng};

    fn tiny_ngpt() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::new(Variant::Ngpt, 8, 2, 2, 11, 6);
        let params = init_params(&cfg, 3).unwrap();
        (cfg, params)
    }

    fn zero_grads(params: &ModelParams) -> GradStore {
        let mut g = GradStore::new();
        params.visit(&mut |name, _, t| {
            g.insert(name.to_string(), Tensor::zeros(t.shape()));
        });
        g
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = OptimConfig { warmup_steps: 100, ..OptimConfig::for_variant(Variant::Gpt, 2e-3, 1100) };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 2e-3);
        assert_eq!(lr_at(1100, &cfg), 0.0);
        let mid = lr_at(600, &cfg);
        assert!((mid - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn schedule_without_warmup_starts_at_lr0() {
        let cfg = OptimConfig::for_variant(Variant::Ngpt, 5e-3, 1000);
        assert_eq!(cfg.warmup_steps, 0);
        assert_eq!(lr_at(0, &cfg), 5e-3);
    }

    #[test]
    fn warmup_longer_than_total_is_invalid() {
        let mut cfg = OptimConfig::for_variant(Variant::Gpt, 1e-3, 100);
        cfg.warmup_steps = 101;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let (_, mut params) = tiny_ngpt();
        let before = params.clone();
        let grads = zero_grads(&params);
        let mut state = AdamState::new();
        let cfg = OptimConfig::for_variant(Variant::Ngpt, 1e-3, 10);
        adam_step(&mut params, &grads, &mut state, 1e-3, &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn ten_steps_to_double_with_unit_moment_ratio() {
        // Steady m_hat / sqrt(v_hat) = -1 and lr 0.001 moves 0.01 to 0.02 in
        // ten steps.
        let cfg = OptimConfig::for_variant(Variant::Ngpt, 1e-3, 100);
        let mut theta = Tensor::vector(vec![0.01]);
        let grad = Tensor::vector(vec![-1.0]);
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        for t in 1..=10 {
            adam_update_tensor(&mut theta, &grad, &mut m, &mut v, t, 1e-3, &cfg, false);
        }
        assert!((theta.data()[0] - 0.02).abs() < 1e-9, "{}", theta.data()[0]);
    }

    #[test]
    fn single_step_matches_hand_computed_oracle() {
        let cfg = OptimConfig::for_variant(Variant::Ngpt, 1e-3, 100);
        let mut theta = Tensor::vector(vec![0.0]);
        let grad = Tensor::vector(vec![1.0]);
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        adam_update_tensor(&mut theta, &grad, &mut m, &mut v, 1, 1e-3, &cfg, false);
        // By hand: m = 0.1g, v = 0.05g^2; bias correction cancels both, so
        // m_hat = 1, v_hat = 1, theta = -lr / (1 + eps).
        let expect = -(1e-3) * ((1.0 - cfg.beta1) / (1.0 - cfg.beta1))
            / (((1.0 - cfg.beta2) / (1.0 - cfg.beta2)).sqrt() + cfg.eps);
        assert!((theta.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn fresh_states_give_bitwise_identical_updates() {
        let (_, params) = tiny_ngpt();
        let mut rng = Rng::new(17);
        let mut grads = GradStore::new();
        params.visit(&mut |name, _, t| {
            grads.insert(name.to_string(), randn(&mut rng, t.shape(), 0.0, 0.1));
        });
        let cfg = OptimConfig::for_variant(Variant::Ngpt, 1e-3, 10);
        let mut a = params.clone();
        let mut b = params.clone();
        adam_step(&mut a, &grads, &mut AdamState::new(), 1e-3, &cfg).unwrap();
        adam_step(&mut b, &grads, &mut AdamState::new(), 1e-3, &cfg).unwrap();
        let mut pairs = Vec::new();
        a.visit(&mut |name, _, t| pairs.push((name.to_string(), t.clone())));
        b.visit(&mut |name, _, t| {
            let (n, ta) = pairs.remove(0);
            assert_eq!(n, name);
            for (x, y) in ta.data().iter().zip(t.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        });
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let (_, mut params) = tiny_ngpt();
        let before = params.clone();
        let mut grads = zero_grads(&params);
        grads.get_mut("layers.1.w_u").unwrap().data_mut()[3] = f64::NAN;
        let cfg = OptimConfig::for_variant(Variant::Ngpt, 1e-3, 10);
        let err = adam_step(&mut params, &grads, &mut AdamState::new(), 1e-3, &cfg).unwrap_err();
        match &err {
            OptimError::NonFiniteGradient { param } => assert_eq!(param, "layers.1.w_u"),
            other => panic!("unexpected error {other:?}"),
        }
        // No partial update.
        assert_eq!(params, before);
    }

    #[test]
    fn post_step_normalize_is_idempotent() {
        let (cfg, mut params) = tiny_ngpt();
        // Knock parameters off the sphere first.
        let mut rng = Rng::new(23);
        params.visit_mut(&mut |_, meta, t| {
            if meta.normalize.is_some() {
                let noise = randn(&mut rng, t.shape(), 0.0, 0.05);
                t.add_assign(&noise);
            }
        });
        post_step_normalize(&mut params, &cfg).unwrap();
        let snapshot = params.clone();
        post_step_normalize(&mut params, &cfg).unwrap();
        let mut tensors = Vec::new();
        snapshot.visit(&mut |_, _, t| tensors.push(t.clone()));
        params.visit(&mut |_, _, t| {
            let prev = tensors.remove(0);
            for (x, y) in prev.data().iter().zip(t.data()) {
                assert!((x - y).abs() < 1e-14);
            }
        });
    }

    #[test]
    fn normalize_refuses_baseline_variant() {
        let cfg = ModelConfig::new(Variant::Gpt, 8, 1, 2, 11, 6);
        let mut params = init_params(&cfg, 1).unwrap();
        assert!(matches!(
            post_step_normalize(&mut params, &cfg),
            Err(OptimError::WrongVariant { .. })
        ));
    }

    #[test]
    fn hundred_random_steps_stay_on_manifold() {
        let (cfg, mut params) = tiny_ngpt();
        let ocfg = OptimConfig::for_variant(Variant::Ngpt, 3e-3, 200);
        let mut state = AdamState::new();
        let mut rng = Rng::new(29);
        for _ in 0..100 {
            let mut grads = GradStore::new();
            params.visit(&mut |name, _, t| {
                grads.insert(name.to_string(), randn(&mut rng, t.shape(), 0.0, 0.5));
            });
            adam_step(&mut params, &grads, &mut state, 3e-3, &ocfg).unwrap();
            post_step_normalize(&mut params, &cfg).unwrap();
        }
        assert!(params.norm_audit() < 1e-12, "audit {}", params.norm_audit());
    }

    #[test]
    fn audit_detects_normalizing_a_copy_instead_of_canonical_storage() {
        // The classic integration bug: normalizing a detached copy of the
        // weights while the optimizer keeps updating the originals.
        let (cfg, mut params) = tiny_ngpt();
        let ocfg = OptimConfig::for_variant(Variant::Ngpt, 1e-2, 100);
        let mut state = AdamState::new();
        let mut rng = Rng::new(31);
        let mut grads = GradStore::new();
        params.visit(&mut |name, _, t| {
            grads.insert(name.to_string(), randn(&mut rng, t.shape(), 0.0, 1.0));
        });
        adam_step(&mut params, &grads, &mut state, 1e-2, &ocfg).unwrap();
        let mut copy = params.clone();
        post_step_normalize(&mut copy, &cfg).unwrap();
        assert!(copy.norm_audit() < 1e-12);
        // Canonical storage was never normalized; the audit catches it.
        assert!(params.norm_audit() > 1e-6);
    }
}
