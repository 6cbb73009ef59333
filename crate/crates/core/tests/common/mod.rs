//! Central finite differences against the graph's reverse pass.

use mreg::autograd::{Graph, Var};
use mreg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Denominator floor so that exact-zero gradients compare on absolute error.
pub const FLOOR: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.scalar(out)
}

#[derive(Debug, Clone, Copy)]
pub struct Worst {
    pub rel_error: f64,
    pub checked: usize,
}

/// Compares analytic and numeric derivatives of the scalar `f` on up to
/// `per_input` random coordinates of every input.
pub fn check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var, per_input: usize, seed: u64) -> Worst {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst {
        rel_error: 0.0,
        checked: 0,
    };
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        let n = inputs[k].len();
        let coords: Vec<usize> = if n <= per_input {
            (0..n).collect()
        } else {
            (0..per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * STEP);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst.rel_error = worst.rel_error.max(rel);
            worst.checked += 1;
        }
    }
    worst
}
