//! Named parameter storage and the layers built on top of [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;


use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// All model arrays by dotted name, e.g. `thermal.bb.s2.conv1.w`.
///
/// Ordered, so iteration (and therefore checkpoint layout) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Copies every `from.*` array to `to.*`, overwriting.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), v.clone())))
            .collect();
        for (k, v) in copies {
            self.tensors.insert(k, v);
        }
    }

    /// Order-sensitive checksum over names and bit patterns of arrays whose
    /// name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (k, v) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            for b in k.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= v.checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Binds parameters from a [`ParamStore`] into a [`Graph`] on first use.
///
/// Names for which `trainable` returns true become differentiable leaves;
/// everything else enters the graph as a constant.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    bound: BTreeMap<String, Var>,
}

pub fn frozen(_: &str) -> bool {
    false
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self { graph: Graph::new(), store, trainable, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if (self.trainable)(name) { self.graph.param(t) } else { self.graph.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Gradients of every bound trainable parameter, by name. Parameters the
    /// loss does not reach get an all-zero gradient.
    pub fn named_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(_, &v)| self.graph.requires_grad(v))
            .map(|(k, &v)| {
                let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }
}

/// Convolution layer description; weights live in the store as
/// `{name}.w` (`[cout, cin, k, k]`) and `{name}.b` (`[cout]`).
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { name: name.into(), cin, cout, k, stride, pad: k / 2 }
    }

    /// He-normal weights, zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = (self.cin * self.k * self.k) as f32;
        self.init_scaled(store, rng, (2.0 / fan_in).sqrt());
    }

    pub fn init_scaled(&self, store: &mut ParamStore, rng: &mut impl Rng, std: f32) {
        let n = self.cout * self.cin * self.k * self.k;
        let w = (0..n).map(|_| std * sample_normal(rng)).collect();
        store.insert(format!("{}.w", self.name), Tensor::new(vec![self.cout, self.cin, self.k, self.k], w).expect("conv"));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(&format!("{}.w", self.name))?;
        let b = s.p(&format!("{}.b", self.name))?;
        s.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Batch normalization with trainable `{name}.gamma` / `{name}.beta` and
/// running statistics `{name}.mean` / `{name}.var`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

pub const BN_MOMENTUM: f32 = 0.1;

impl BatchNorm {
    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.name), Tensor::full(&[self.channels], 1.0));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
        store.insert(format!("{}.mean", self.name), Tensor::zeros(&[self.channels]));
        store.insert(format!("{}.var", self.name), Tensor::full(&[self.channels], 1.0));
    }

    /// In training mode uses batch statistics; returns the node so callers
    /// can read them back with [`Graph::batch_stats`].
    pub fn forward(&self, s: &mut Session, x: Var, training: bool) -> Result<Var> {
        let g = s.p(&format!("{}.gamma", self.name))?;
        let b = s.p(&format!("{}.beta", self.name))?;
        if training {
            Ok(s.graph.batch_norm(x, g, b, None))
        } else {
            let mean = s.store().get(&format!("{}.mean", self.name))?.data().to_vec();
            let var = s.store().get(&format!("{}.var", self.name))?.data().to_vec();
            Ok(s.graph.batch_norm(x, g, b, Some((&mean, &var))))
        }
    }

    pub fn is_running_stat(name: &str) -> bool {
        name.ends_with(".mean") || name.ends_with(".var")
    }
}

/// Updates running statistics from a training-mode batch-norm node.
pub fn update_running_stats(store: &mut ParamStore, bn: &BatchNorm, batch: (Vec<f32>, Vec<f32>), count: usize) -> Result<()> {
    let (mean, var) = batch;
    let unbias = if count > 1 { count as f32 / (count as f32 - 1.0) } else { 1.0 };
    let rm = store.get_mut(&format!("{}.mean", bn.name))?;
    for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
    }
    let rv = store.get_mut(&format!("{}.var", bn.name))?;
    for (r, v) in rv.data_mut().iter_mut().zip(&var) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let std = (1.0 / self.fin as f32).sqrt();
        let w = (0..self.fin * self.fout).map(|_| std * sample_normal(rng)).collect();
        store.insert(format!("{}.w", self.name), Tensor::new(vec![self.fout, self.fin], w).expect("linear"));
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.fout]));
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(&format!("{}.w", self.name))?;
        let b = s.p(&format!("{}.b", self.name))?;
        s.graph.linear(x, w, b)
    }
}

/// Inverted dropout mask: entries are 0 or `1 / (1 - p)`.
pub fn dropout_mask(len: usize, p: f32, rng: &mut impl Rng) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f32>() < p { 0.0 } else { keep }).collect()
}

pub fn sample_normal(rng: &mut impl Rng) -> f32 {
    rng.sample(rand_distr::StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn copy_prefix_and_checksum() {
        let mut s = ParamStore::new();
        s.insert("rgb.a", Tensor::scalar(1.0));
        s.insert("rgb.b", Tensor::scalar(2.0));
        s.copy_prefix("rgb.", "thermal.");
        assert_eq!(s.get("thermal.b").unwrap().item(), 2.0);
        let before = s.checksum("rgb.");
        s.get_mut("thermal.a").unwrap().data_mut()[0] = 5.0;
        assert_eq!(s.checksum("rgb."), before);
        s.get_mut("rgb.a").unwrap().data_mut()[0] = 5.0;
        assert_ne!(s.checksum("rgb."), before);
    }

    #[test]
    fn session_binds_trainable_and_frozen() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Conv::new("t.c", 1, 2, 3, 1).init(&mut store, &mut rng);
        Conv::new("f.c", 2, 2, 3, 1).init(&mut store, &mut rng);
        let trainable = |n: &str| n.starts_with("t.");
        let mut s = Session::new(&store, &trainable);
        let x = s.input(Tensor::full(&[1, 1, 4, 4], 0.5));
        let y = Conv::new("t.c", 1, 2, 3, 1).forward(&mut s, x).unwrap();
        let z = Conv::new("f.c", 2, 2, 3, 1).forward(&mut s, y).unwrap();
        let p = s.graph.global_avg_pool(z);
        let w = s.input(Tensor::full(&[1, 2], 1.0));
        let b = s.input(Tensor::zeros(&[1]));
        let l = s.graph.linear(p, w, b).unwrap();
        let loss = s.graph.weighted_sum(&[(l, 1.0)]);
        let mut g = s.graph.backward(loss).unwrap();
        let named = s.named_grads(&mut g);
        assert!(named.contains_key("t.c.w"));
        assert!(!named.contains_key("f.c.w"));
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask(10_000, 0.5, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((4500..5500).contains(&kept));
    }
}
