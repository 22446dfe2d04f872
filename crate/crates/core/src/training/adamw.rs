use std::collections::BTreeMap;

use super::Gradients;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::tensor::{real, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Anything exposing named trainable tensors to the optimizer.
pub trait Parameters<T: Real> {
    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

impl<T: Real> Parameters<T> for EncoderModel<T> {
    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let lora = self.has_lora();
        self.visit_tensors_mut(|name, t| {
            let adapter = name.ends_with(".lora_a") || name.ends_with(".lora_b");
            if !lora || adapter {
                f(name, t)
            }
        });
    }
}

impl<T: Real> Parameters<T> for BTreeMap<String, Tensor<T>> {
    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.iter_mut() {
            f(name, t);
        }
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState<T: Real> {
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self { step: 0, moments: BTreeMap::new() }
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW update with decoupled weight decay: every trainable tensor is
/// first shrunk by `1 - lr·wd`, then moved along the bias-corrected Adam
/// direction. Tensors without a gradient are treated as having a zero one.
pub fn adamw_step<T: Real>(
    params: &mut impl Parameters<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    cfg.validate()?;
    state.step += 1;
    let t = state.step as i32;
    let lr = real::<T>(cfg.learning_rate);
    let decay = real::<T>(1.0 - cfg.learning_rate * cfg.weight_decay);
    let (b1, b2) = (real::<T>(cfg.beta1), real::<T>(cfg.beta2));
    let c1 = real::<T>(1.0 - cfg.beta1.powi(t));
    let c2 = real::<T>(1.0 - cfg.beta2.powi(t));
    let eps = real::<T>(cfg.eps);
    let mut failure = None;
    params.visit_trainable_mut(&mut |name, p| {
        let n = p.numel();
        let grad = grads.get(name);
        if let Some(g) = grad {
            if g.dims() != p.dims() {
                failure
                    .get_or_insert_with(|| Error::Shape(format!("gradient for {name} has dims {:?}, parameter {:?}", g.dims(), p.dims())));
                return;
            }
        }
        let (m, v) = state.moments.entry(name.to_string()).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        if m.len() != n {
            failure.get_or_insert_with(|| Error::Shape(format!("optimizer state for {name} does not match the parameter")));
            return;
        }
        for i in 0..n {
            let gi = grad.map_or(T::zero(), |g| g.data()[i]);
            let x = &mut p.data_mut()[i];
            *x *= decay;
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *x -= lr * mhat / (vhat.sqrt() + eps);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
