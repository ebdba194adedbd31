use serde::{Deserialize, Serialize};

use super::{check_same, Gradients, ParameterSet};
use crate::error::{Error, Result};

/// Plain SGD with heavy-ball momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
}

fn default_lr() -> f32 {
    0.01
}

fn default_momentum() -> f32 {
    0.9
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            momentum: default_momentum(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// `velocity = momentum * velocity + grads; params -= lr * velocity`.
pub fn sgd_step(
    params: &mut ParameterSet,
    grads: &Gradients,
    cfg: &SgdConfig,
    velocity: &mut Gradients,
) -> Result<()> {
    let sig = params.signature();
    check_same(&sig, &grads.signature())?;
    check_same(&sig, &velocity.signature())?;
    for ((p, g), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
    }
    Ok(())
}

/// Optimizer that owns its velocity buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub cfg: SgdConfig,
    pub velocity: Gradients,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, params: &ParameterSet) -> Self {
        Self {
            cfg,
            velocity: Gradients::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) -> Result<()> {
        sgd_step(params, grads, &self.cfg, &mut self.velocity)
    }

    pub fn reset(&mut self) {
        self.velocity.scale(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ShapeSignature;
    use crate::tensor::Tensor;

    fn scalar(v: f32) -> ParameterSet {
        let sig = ShapeSignature(vec![(vec![1, 1], vec![1])]);
        let mut p = ParameterSet::zeros(&sig);
        p.layers[0].weight = Tensor::new(vec![1, 1], vec![v]).unwrap();
        p
    }

    fn scalar_grad(v: f32) -> Gradients {
        Gradients {
            layers: scalar(v).layers,
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = crate::nn::init_mlp(&[3, 2], 1).unwrap();
        let before = p.clone();
        let mut vel = Gradients::zeros_like(&p);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0 };
        sgd_step(&mut p, &Gradients::zeros_like(&before), &cfg, &mut vel).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn single_step_arithmetic() {
        let mut p = scalar(1.0);
        let mut vel = Gradients::zeros_like(&p);
        let cfg = SgdConfig { lr: 1.0, momentum: 0.0 };
        sgd_step(&mut p, &scalar_grad(0.25), &cfg, &mut vel).unwrap();
        assert_eq!(p.layers[0].weight.data(), &[0.75]);
    }

    #[test]
    fn two_momentum_steps_match_hand_unrolled() {
        // v1 = g1; p1 = p0 - lr g1
        // v2 = 0.9 g1 + g2; p2 = p1 - lr (0.9 g1 + g2)
        let (p0, g1, g2, lr) = (2.0f64, 0.5f64, -0.3f64, 0.1f64);
        let expected = p0 - lr * g1 - lr * (0.9 * g1 + g2);

        let mut p = scalar(p0 as f32);
        let mut opt = Sgd::new(SgdConfig { lr: lr as f32, momentum: 0.9 }, &p);
        opt.step(&mut p, &scalar_grad(g1 as f32)).unwrap();
        opt.step(&mut p, &scalar_grad(g2 as f32)).unwrap();
        assert!((p.layers[0].weight.data()[0] as f64 - expected).abs() < 1e-6);
        assert!((opt.velocity.layers[0].weight.data()[0] as f64 - (0.9 * g1 + g2)).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = crate::nn::init_mlp(&[3, 2], 1).unwrap();
        let other = crate::nn::init_mlp(&[3, 4], 1).unwrap();
        let mut vel = Gradients::zeros_like(&p);
        let err = sgd_step(&mut p, &Gradients::zeros_like(&other), &SgdConfig::default(), &mut vel);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn validate_rejects_nonpositive_lr() {
        assert!(SgdConfig { lr: 0.0, momentum: 0.0 }.validate().is_err());
        assert!(SgdConfig { lr: 0.1, momentum: 1.0 }.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}
