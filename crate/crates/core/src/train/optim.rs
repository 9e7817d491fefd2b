use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Gradients, Param, ParamId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub max_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl OptimConfig {
    pub fn stablekd() -> Self {
        OptimConfig { max_lr: 0.5, momentum: 0.9, weight_decay: 5e-4, batch_size: 128 }
    }

    pub fn baseline() -> Self {
        OptimConfig { max_lr: 0.1, ..Self::stablekd() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr must be positive, got {}", self.max_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Velocity buffers, created on first use. Frozen parameters never get one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Momentum<T> {
    buffers: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> Momentum<T> {
    pub fn new() -> Self {
        Momentum { buffers: BTreeMap::new() }
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor<T>> {
        self.buffers.get(id)
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }
}

/// One SGD step with coupled weight decay:
/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
///
/// `grads` must hold exactly the trainable parameters among `params`.
pub fn sgd_step<'a, T: Float>(
    params: impl IntoIterator<Item = &'a mut Param<T>>,
    grads: &Gradients<T>,
    state: &mut Momentum<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, m, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    let mut stepped = 0;
    for p in params {
        if !p.trainable {
            continue;
        }
        let g =
            grads.get(&p.id).ok_or_else(|| Error::Contract(format!("no gradient for trainable parameter {}", p.id)))?;
        if g.shape() != p.tensor.shape() {
            return Err(Error::Contract(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                p.id,
                g.shape(),
                p.tensor.shape()
            )));
        }
        let v = state.buffers.entry(p.id.clone()).or_insert_with(|| Tensor::zeros(p.tensor.shape()));
        for ((vi, &gi), ti) in v.data_mut().iter_mut().zip(g.data()).zip(p.tensor.data_mut()) {
            *vi = m * *vi + (gi + wd * *ti);
            *ti -= lr * *vi;
        }
        stepped += 1;
    }
    if stepped != grads.len() {
        return Err(Error::Contract(format!("{} gradients supplied for {stepped} trainable parameters", grads.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> (Param<f32>, Gradients<f32>) {
        let p = Param::new("w", Tensor::scalar(1.0));
        let mut g = Gradients::default();
        g.insert(p.id.clone(), Tensor::scalar(v));
        (p, g)
    }

    #[test]
    fn null_and_plain_steps() {
        let (mut p, g) = one(3.0);
        sgd_step([&mut p], &g, &mut Momentum::new(), 0.0, 0.9, 0.1).unwrap();
        assert_eq!(p.tensor.data(), &[1.0]);
        sgd_step([&mut p], &g, &mut Momentum::new(), 0.5, 0.0, 0.0).unwrap();
        assert_eq!(p.tensor.data(), &[-0.5]);
    }

    #[test]
    fn decay_only() {
        let (mut p, g) = one(0.0);
        sgd_step([&mut p], &g, &mut Momentum::new(), 1.0, 0.0, 0.1).unwrap();
        assert_eq!(p.tensor.data(), &[0.9]);
    }

    #[test]
    fn momentum_accumulates() {
        let (mut p, g) = one(1.0);
        let mut m = Momentum::new();
        sgd_step([&mut p], &g, &mut m, 1.0, 0.5, 0.0).unwrap();
        sgd_step([&mut p], &g, &mut m, 1.0, 0.5, 0.0).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(p.tensor.data(), &[-1.5]);
        assert_eq!(m.get(&ParamId::new("w")).unwrap().data(), &[1.5]);
    }

    #[test]
    fn coverage_is_checked() {
        let (mut p, _) = one(0.0);
        assert!(matches!(
            sgd_step([&mut p], &Gradients::default(), &mut Momentum::new(), 1.0, 0.0, 0.0),
            Err(Error::Contract(_))
        ));
        let (mut q, mut g) = one(0.0);
        g.insert(ParamId::new("extra"), Tensor::scalar(0.0));
        assert!(sgd_step([&mut q], &g, &mut Momentum::new(), 1.0, 0.0, 0.0).is_err());
        let mut frozen = Param::frozen("f", Tensor::scalar(1.0f32));
        sgd_step([&mut frozen], &Gradients::default(), &mut Momentum::new(), 1.0, 0.0, 0.0).unwrap();
        assert_eq!(frozen.tensor.data(), &[1.0]);
    }
}
