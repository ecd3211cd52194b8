//! Plain SGD with a cosine-annealed learning rate, and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParameterSet;

fn check_grads(params: &ParameterSet, grads: &ParameterSet) -> Result<()> {
    params.ensure_same_structure(grads, "optimizer step")?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Diverged(format!("non-finite gradient for `{name}`")));
    }
    Ok(())
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut ParameterSet, grads: &ParameterSet, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        for (p, g) in p.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// `ν_min + ½(ν_max − ν_min)(1 + cos(πt/T))`, clamped to `ν_min` past `T`.
pub fn cosine_lr(t: u64, total: u64, max_lr: f64, min_lr: f64) -> f64 {
    if total == 0 || t >= total {
        return min_lr;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr_at(&self, t: u64) -> f64 {
        cosine_lr(t, self.total_steps, self.max_lr, self.min_lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Optimizer state. For SGD the moment sets are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub kind: OptKind,
    pub step: u64,
    pub first_moment: ParameterSet,
    pub second_moment: ParameterSet,
    pub adam: AdamConfig,
    pub schedule: Option<CosineSchedule>,
}

impl OptState {
    pub fn sgd(schedule: Option<CosineSchedule>) -> Self {
        Self {
            kind: OptKind::Sgd,
            step: 0,
            first_moment: ParameterSet::new(),
            second_moment: ParameterSet::new(),
            adam: AdamConfig::default(),
            schedule,
        }
    }

    /// Zeroed moments mirroring `params`.
    pub fn adam(params: &ParameterSet, config: AdamConfig) -> Self {
        Self {
            kind: OptKind::Adam,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            adam: config,
            schedule: None,
        }
    }

    /// Scheduled rate for the next step, or `fallback` without a schedule.
    pub fn current_lr(&self, fallback: f64) -> f64 {
        self.schedule.map_or(fallback, |s| s.lr_at(self.step))
    }

    /// Steps with this state's optimizer kind.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) -> Result<()> {
        match self.kind {
            OptKind::Sgd => {
                sgd_step(params, grads, lr)?;
                self.step += 1;
                Ok(())
            }
            OptKind::Adam => adam_step(params, grads, self, lr),
        }
    }
}

/// One bias-corrected Adam update. Nothing is written if any moment or
/// parameter would become non-finite.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptState,
    lr: f64,
) -> Result<()> {
    if state.kind != OptKind::Adam {
        return Err(Error::InvalidArgument("adam_step on a non-Adam optimizer state".into()));
    }
    check_grads(params, grads)?;
    params.ensure_same_structure(&state.first_moment, "adam first moment")?;
    params.ensure_same_structure(&state.second_moment, "adam second moment")?;

    let AdamConfig { beta1, beta2, eps } = state.adam;
    let t = state.step + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);

    let mut m_new = state.first_moment.clone();
    let mut v_new = state.second_moment.clone();
    let mut p_new = params.clone();
    for ((((_, p), (_, g)), (_, m)), (name, v)) in p_new
        .iter_mut()
        .zip(grads.iter())
        .zip(m_new.iter_mut())
        .zip(v_new.iter_mut())
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            if !(m[i].is_finite() && v[i].is_finite() && p[i].is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite Adam moment for `{name}`[{i}] at step {t}"
                )));
            }
        }
    }
    *params = p_new;
    state.first_moment = m_new;
    state.second_moment = v_new;
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(name: &str, v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = one("t", 1.0);
        sgd_step(&mut p, &one("t", 2.0), 0.5).unwrap();
        assert_eq!(p.get("t").unwrap().item(), 0.0);
        let mut p = one("t", 1.0);
        sgd_step(&mut p, &one("t", 2.0), 0.0).unwrap();
        assert_eq!(p.get("t").unwrap().item(), 1.0);
    }

    #[test]
    fn sgd_on_quadratic_decays_geometrically() {
        let mut p = one("t", 1.0);
        for _ in 0..100 {
            let g = 2.0 * p.get("t").unwrap().item();
            sgd_step(&mut p, &one("t", g), 0.1).unwrap();
        }
        let expected = 0.8f64.powi(100);
        assert!((p.get("t").unwrap().item() - expected).abs() < 1e-12 * expected.max(1e-300) + 1e-24);
        assert!((expected - 2.037e-10).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = one("t", 1.0);
        assert!(matches!(
            sgd_step(&mut p, &one("t", f64::NAN), 0.1),
            Err(Error::Diverged(_))
        ));
        let mut s = OptState::adam(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &one("t", f64::INFINITY), &mut s, 0.1).is_err());
        assert_eq!(p.get("t").unwrap().item(), 1.0);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.1, 0.0), 0.1);
        assert!(cosine_lr(100, 100, 0.1, 0.0).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1, 0.0) - 0.05).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 0.1, 0.0), 0.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = one("t", 0.7);
        let mut s = OptState::adam(&p, AdamConfig::default());
        adam_step(&mut p, &one("t", 0.0), &mut s, 0.1).unwrap();
        assert_eq!(p.get("t").unwrap().item(), 0.7);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        for g in [1e-3, -0.5, 42.0] {
            let mut p = one("t", 0.0);
            let mut s = OptState::adam(&p, AdamConfig::default());
            adam_step(&mut p, &one("t", g), &mut s, 0.01).unwrap();
            let step = p.get("t").unwrap().item();
            assert!((step + 0.01 * g.signum()).abs() < 1e-7, "g={g} step={step}");
        }
    }

    #[test]
    fn adam_constant_gradient_tends_to_sign_step() {
        let mut p = one("t", 0.0);
        let mut s = OptState::adam(&p, AdamConfig::default());
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.get("t").unwrap().item();
            adam_step(&mut p, &one("t", 0.3), &mut s, 1e-3).unwrap();
            last = p.get("t").unwrap().item() - before;
        }
        assert!((last + 1e-3).abs() < 1e-9);
    }
}
