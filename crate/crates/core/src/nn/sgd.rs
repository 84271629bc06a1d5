//! SGD with heavy-ball momentum and weight decay.

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Elem;

#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One optimizer step over the trainable parameters selected by `filter`:
///
///   g   <- grad + weight_decay * value
///   buf <- momentum * buf + g
///   value <- value - lr * buf
///
/// Gradients are zeroed afterwards. A NaN/Inf gradient aborts the whole step
/// before any parameter is touched and reports the offending name.
pub fn sgd_step_filtered<E: Elem>(
    params: &mut ParamSet<E>,
    cfg: &SgdConfig,
    filter: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, p) in params.iter() {
        if p.trainable && filter(name) && !p.grad.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{name}'; step aborted"
            )));
        }
    }
    let lr = E::from_f64(cfg.lr);
    let momentum = E::from_f64(cfg.momentum);
    let wd = E::from_f64(cfg.weight_decay);
    for (name, p) in params.iter_mut() {
        if !p.trainable || !filter(name) {
            continue;
        }
        for i in 0..p.value.numel() {
            let g = p.grad.data()[i] + wd * p.value.data()[i];
            let buf = momentum * p.momentum.data()[i] + g;
            p.momentum.data_mut()[i] = buf;
            p.value.data_mut()[i] = p.value.data()[i] - lr * buf;
        }
        p.zero_grad();
    }
    Ok(())
}

/// Step all trainable parameters in the set.
pub fn sgd_step<E: Elem>(params: &mut ParamSet<E>, cfg: &SgdConfig) -> Result<()> {
    sgd_step_filtered(params, cfg, |_| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Parameter;
    use crate::nn::tensor::Tensor;

    fn single(value: f32, grad: f32, trainable: bool) -> ParamSet<f32> {
        let mut set = ParamSet::new();
        let mut p = Parameter::new(Tensor::scalar(value), trainable);
        p.grad = Tensor::scalar(grad);
        set.insert("w", p);
        set
    }

    #[test]
    fn plain_gradient_step() {
        let mut set = single(1.0, 0.5, true);
        sgd_step(&mut set, &SgdConfig { lr: 0.4, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        assert_eq!(set.get("w").value.scalar_value(), 0.8);
        assert_eq!(set.get("w").grad.scalar_value(), 0.0);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut set = single(1.0, 123.0, false);
        sgd_step(&mut set, &SgdConfig { lr: 0.4, momentum: 0.9, weight_decay: 1e-4 }).unwrap();
        assert_eq!(set.get("w").value.scalar_value(), 1.0);
    }

    #[test]
    fn heavy_ball_two_step_trace() {
        // value 1.0, grads (0.5, 0.5), lr 0.1, momentum 0.9:
        // step1: buf=0.5, v = 1 - 0.05 = 0.95
        // step2: buf=0.9*0.5+0.5=0.95, v = 0.95 - 0.095 = 0.855
        let mut set = single(1.0, 0.5, true);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut set, &cfg).unwrap();
        set.get_mut("w").grad = Tensor::scalar(0.5);
        sgd_step(&mut set, &cfg).unwrap();
        let v = set.get("w").value.scalar_value();
        assert!((v - 0.855).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn nan_gradient_aborts_and_names_parameter() {
        let mut set = single(1.0, f32::NAN, true);
        let err = sgd_step(&mut set, &SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap_err();
        match err {
            crate::error::Error::Numeric(msg) => assert!(msg.contains("'w'"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
        // Aborted before mutation.
        assert_eq!(set.get("w").value.scalar_value(), 1.0);
    }

    #[test]
    fn weight_decay_applies_before_momentum_buffer() {
        // g = grad + wd*value = 0 + 0.1*2 = 0.2; buf = 0.2; v = 2 - 1*0.2 = 1.8
        let mut set = single(2.0, 0.0, true);
        sgd_step(&mut set, &SgdConfig { lr: 1.0, momentum: 0.5, weight_decay: 0.1 }).unwrap();
        assert!((set.get("w").value.scalar_value() - 1.8).abs() < 1e-7);
        // second step with zero grad: g = 0.1*1.8 = 0.18; buf = 0.5*0.2+0.18 = 0.28
        sgd_step(&mut set, &SgdConfig { lr: 1.0, momentum: 0.5, weight_decay: 0.1 }).unwrap();
        assert!((set.get("w").value.scalar_value() - (1.8 - 0.28)).abs() < 1e-6);
    }
}
