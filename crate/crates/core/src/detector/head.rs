use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::optim::{ParamId, ParamStore};

/// `y = x·W + b` with `W[in × out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.add_he(&format!("{name}.w"), &[d_in, d_out], d_in, rng),
            bias: store.add_zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: store.add_zeros(&format!("{name}.w"), &[d_in, d_out]),
            bias: store.add_zeros(&format!("{name}.b"), &[d_out]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// One cascade stage head: two hidden dense layers, then a classifier over
/// background + `K` classes and a class-agnostic 4-delta regressor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    /// `[R × (K+1)]` logits.
    pub logits: Var,
    /// `[R × 4]`.
    pub deltas: Var,
}

impl CascadeHead {
    /// The two output layers start at zero, so a fresh head predicts a
    /// uniform posterior and leaves boxes where they are.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, hidden, rng),
            cls: Linear::zeros(store, &format!("{name}.cls"), hidden, classes + 1),
            reg: Linear::zeros(store, &format!("{name}.reg"), hidden, 4),
        }
    }

    /// `feats` is `[R × C × out × out]` from RoI align.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: Var) -> Result<HeadOutput> {
        let s = g.shape(feats).to_vec();
        let flat = g.reshape(feats, &[s[0], s[1..].iter().product()])?;
        let h = self.fc1.forward(g, store, flat)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = g.relu(h);
        Ok(HeadOutput {
            logits: self.cls.forward(g, store, h)?,
            deltas: self.reg.forward(g, store, h)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rand_tensor;
    use crate::graph::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_head_is_uniform_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = CascadeHead::new(&mut store, "h", 2 * 3 * 3, 8, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[5, 2, 3, 3]));
        let out = head.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(out.logits), &[5, 3]);
        assert_eq!(g.shape(out.deltas), &[5, 4]);
        let p = softmax_rows(g.data(out.logits), 3);
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn trained_rows_still_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let head = CascadeHead::new(&mut store, "h", 4, 6, 1, &mut rng);
        for v in store.get_mut(head.cls.weight).data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[7, 1, 2, 2]));
        let out = head.forward(&mut g, &store, x).unwrap();
        for row in softmax_rows(g.data(out.logits), 2).chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
