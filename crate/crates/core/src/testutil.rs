//! Central-difference gradient oracle shared by the unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn eval(inputs: &[Tensor], build: &impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.scalar(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares backprop gradients of every input against central differences
/// on up to 24 coordinates per input.
pub fn assert_gradients(inputs: &[Tensor], build: &impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        let n = input.len();
        let step = (n / 24).max(1);
        for idx in (0..n).step_by(step) {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= h;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let err = relative_error(analytic[idx], numeric);
            assert!(
                err <= tol,
                "input {k} coord {idx}: analytic {} vs numeric {numeric} (rel err {err:e})",
                analytic[idx]
            );
        }
    }
}
