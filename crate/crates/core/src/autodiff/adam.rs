use super::params::{ParamGrads, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyperparameters. Weight decay is classic L2: `wd · w` is added to
/// the gradient before the moment updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moments plus per-parameter step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: Vec<u64>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; store.len()],
            step: 0,
        }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched, moments included.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![store.len()],
                rhs: vec![self.m.len()],
            });
        }
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (eps, wd, lr_t) = (T::lit(cfg.eps), T::lit(cfg.weight_decay), T::lit(lr));
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let w = store.value_mut(id);
            if g.shape() != w.shape() || self.m[i].shape() != w.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: w.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((wj, &gj), mj), vj) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gd = gj + wd * *wj;
                *mj = b1 * *mj + (T::one() - b1) * gd;
                *vj = b2 * *vj + (T::one() - b2) * gd * gd;
                let mhat = *mj / c1;
                let vhat = *vj / c2;
                *wj -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
