//! Central finite-difference gradient checking.
//!
//! This is a verification oracle: it only ever evaluates forward passes and
//! compares them against what [`Graph::backward`] produced.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so that gradients that are
/// zero up to roundoff do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Uniform `[-1, 1)` tensor.
pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn eval(inputs: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward failed");
    g.data(out)[0]
}

/// Largest relative error between analytic and central-difference
/// gradients over every element of every input.
pub fn check_grads(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    check_grads_sampled(inputs, usize::MAX, 0, f)
}

/// As [`check_grads`], probing at most `per_tensor` randomly chosen
/// elements of each input.
pub fn check_grads_sampled(
    inputs: &[Tensor],
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut g, &vars).expect("forward failed");
    g.backward(out).expect("backward failed");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let n = inputs[ti].len();
        let analytic: Vec<f64> = match g.grad(v) {
            Some(gr) => gr.to_vec(),
            None => alloc::vec![0.0; n],
        };
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_tensor).into_vec()
        };
        for j in picks {
            let orig = probe[ti].data()[j];
            probe[ti].data_mut()[j] = orig + STEP;
            let up = eval(&probe, &f);
            probe[ti].data_mut()[j] = orig - STEP;
            let down = eval(&probe, &f);
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}
