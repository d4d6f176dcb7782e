use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named model parameters, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// He-uniform initialisation: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn add_he(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = libm::sqrt(6.0 / fan_in.max(1) as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape, data).unwrap())
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Global L2 norm of all gradients (absent gradients count as zero).
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .tensors
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum();
        libm::sqrt(sq)
    }

    /// Rescale gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for g in self.tensors.iter_mut().filter_map(|t| t.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
        norm
    }

    /// Replace every value from `other`, matched by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Checkpoint(alloc::format!("missing parameter `{name}`")))?;
            let src = &other.tensors[j];
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            self.tensors[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// One update over `params`; gradients are zeroed afterwards.
    pub fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(alloc::format!("#{i}")));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let g = p.grad.take().unwrap();
            for ((x, vel), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vel = self.momentum * *vel + gi;
                *x -= lr * *vel;
            }
            let mut g = g;
            g.fill(0.0);
            p.grad = Some(g);
        }
        Ok(())
    }

    pub fn step_store(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| store.get(id).grad.is_none()) {
            return Err(Error::MissingGrad(store.name(id).into()));
        }
        self.step(store.tensors_mut(), lr)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], lr: f64) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(alloc::format!("#{i}")));
        }
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
            self.t = 0;
        }
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let mut g = p.grad.take().unwrap();
            for (((x, mi), vi), gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / (libm::sqrt(*vi / c2) + self.eps);
            }
            g.fill(0.0);
            p.grad = Some(g);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OptimizerKind {
    /// SGD with momentum 0.9.
    #[default]
    Sgd,
    /// Adam with the usual (0.9, 0.999, 1e-8).
    Adam,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd(Sgd::new(0.9)),
            OptimizerKind::Adam => Self::Adam(Adam::default()),
        }
    }

    pub fn step_store(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| store.get(id).grad.is_none()) {
            return Err(Error::MissingGrad(store.name(id).into()));
        }
        match self {
            Self::Sgd(o) => o.step(store.tensors_mut(), lr),
            Self::Adam(o) => o.step(store.tensors_mut(), lr),
        }
    }
}

/// Step schedule with linear warmup: the rate ramps from `warmup_ratio·base`
/// to `base` over `warmup_iters`, then drops by `gamma` at each decay epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_iters: usize,
    pub warmup_ratio: f64,
    pub decay_epochs: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn at(&self, iter: usize, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        let mut lr = self.base * libm::pow(self.gamma, decays as f64);
        if iter < self.warmup_iters {
            let t = iter as f64 / self.warmup_iters as f64;
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * t;
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).with_grad();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut ps = [param(1.5, 3.0), param(-2.0, 7.0)];
        Sgd::new(0.9).step(&mut ps, 0.0).unwrap();
        assert_eq!(ps[0].item(), 1.5);
        assert_eq!(ps[1].item(), -2.0);
    }

    #[test]
    fn plain_step() {
        let mut ps = [param(1.0, 1.0)];
        Sgd::new(0.0).step(&mut ps, 0.1).unwrap();
        assert!((ps[0].item() - 0.9).abs() < 1e-15);
        assert_eq!(ps[0].grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn momentum_recurrence() {
        let mut ps = [param(1.0, 1.0)];
        let mut opt = Sgd::new(0.9);
        opt.step(&mut ps, 0.1).unwrap();
        ps[0].grad = Some(vec![1.0]);
        opt.step(&mut ps, 0.1).unwrap();
        // 1 − 0.1 − 0.1·1.9
        assert!((ps[0].item() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = [Tensor::scalar(1.0)];
        assert!(matches!(
            Sgd::new(0.9).step(&mut ps, 0.1),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut ps = [param(1.0, 4.0), param(2.0, -0.01)];
        Adam::default().step(&mut ps, 0.1).unwrap();
        assert!((ps[0].item() - 0.9).abs() < 1e-6);
        assert!((ps[1].item() - 2.1).abs() < 1e-4);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = [Tensor::scalar(3.0).with_grad()];
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let x = ps[0].item();
            ps[0].grad = Some(vec![2.0 * (x - 1.0)]);
            opt.step(&mut ps, 0.01).unwrap();
        }
        assert!((ps[0].item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn warmup_then_decay() {
        let s = LrSchedule {
            base: 0.00125,
            warmup_iters: 500,
            warmup_ratio: 0.0033,
            decay_epochs: vec![25, 40],
            gamma: 0.1,
        };
        assert!((s.at(0, 0) - 0.00125 * 0.0033).abs() < 1e-15);
        assert!((s.at(500, 0) - 0.00125).abs() < 1e-15);
        assert!(s.at(250, 0) < 0.00125);
        assert!((s.at(10_000, 25) - 0.000125).abs() < 1e-15);
        assert!((s.at(10_000, 45) - 0.0000125).abs() < 1e-15);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_slice(&[0.0, 0.0]));
        store.get_mut(id).grad = Some(vec![3.0, 4.0]);
        assert_eq!(store.clip_grad_norm(1.0), 5.0);
        let g = store.get(id).grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
