use std::collections::BTreeMap;

use crate::error::Result;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f32) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
