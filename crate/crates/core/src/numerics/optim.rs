//! AdamW with decoupled weight decay.

use super::nn::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer over a fixed subset of a [`ParamStore`].
pub struct AdamW<T: Scalar> {
    cfg: AdamWConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>, ids: Vec<ParamId>) -> Self {
        let m = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        AdamW { cfg, ids, m, v, step: 0 }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update. Every owned parameter must have a gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = T::of_f64(self.cfg.lr);
        let b1 = T::of_f64(self.cfg.beta1);
        let b2 = T::of_f64(self.cfg.beta2);
        let eps = T::of_f64(self.cfg.eps);
        let wd = T::of_f64(self.cfg.weight_decay);
        let bc1 = T::of_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = T::of_f64(1.0 - self.cfg.beta2.powi(t));
        let one = T::one();

        for (slot, &id) in self.ids.iter().enumerate() {
            let g = grads
                .get(id.0)
                .and_then(|g| g.as_ref())
                .ok_or_else(|| {
                    Error::usage(format!(
                        "missing gradient for parameter {}",
                        store.name(id)
                    ))
                })?;
            let p = store.get(id);
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} vs parameter {} shape {:?}",
                    g.shape(),
                    store.name(id),
                    p.shape()
                )));
            }
            let mut mv = self.m[slot].data().to_vec();
            let mut vv = self.v[slot].data().to_vec();
            let mut pv = p.data().to_vec();
            for i in 0..pv.len() {
                let gi = g.data()[i];
                mv[i] = b1 * mv[i] + (one - b1) * gi;
                vv[i] = b2 * vv[i] + (one - b2) * gi * gi;
                let mhat = mv[i] / bc1;
                let vhat = vv[i] / bc2;
                // decoupled decay, then the Adam step
                pv[i] = pv[i] - lr * wd * pv[i];
                pv[i] = pv[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            let shape = p.shape().to_vec();
            self.m[slot] = Tensor::from_vec(shape.clone(), mv)?;
            self.v[slot] = Tensor::from_vec(shape.clone(), vv)?;
            store.set(id, Tensor::from_vec(shape, pv)?)?;
        }
        Ok(())
    }

    /// Moment tensors for checkpointing, keyed by parameter name.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(self.ids.len() * 2);
        for (slot, &id) in self.ids.iter().enumerate() {
            out.push((format!("opt.m.{}", store.name(id)), self.m[slot].clone()));
            out.push((format!("opt.v.{}", store.name(id)), self.v[slot].clone()));
        }
        out
    }

    /// Restore moments and step counter saved by [`Self::state_tensors`].
    pub fn restore(
        &mut self,
        store: &ParamStore<T>,
        step: u64,
        lookup: impl Fn(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        for (slot, &id) in self.ids.iter().enumerate() {
            let name = store.name(id);
            let m = lookup(&format!("opt.m.{name}"))
                .ok_or_else(|| Error::config(format!("checkpoint misses opt.m.{name}")))?;
            let v = lookup(&format!("opt.v.{name}"))
                .ok_or_else(|| Error::config(format!("checkpoint misses opt.v.{name}")))?;
            if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                return Err(Error::shape(format!(
                    "optimizer state shape mismatch for {name}"
                )));
            }
            self.m[slot] = m;
            self.v[slot] = v;
        }
        self.step = step;
        Ok(())
    }
}
