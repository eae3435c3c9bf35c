//! Finite-difference checks for the tape operations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let hi = f(&p);
            p[i] = x[i] - h;
            let lo = f(&p);
            p[i] = x[i];
            (hi - lo) / (2.0 * h)
        })
        .collect()
}

/// `max |a - n| / max(|a|, |n|, 1e-6)`; the floor keeps exact zeros from
/// dividing rounding noise by nothing.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Checks the gradient of `sum r_i * out_i` (with a seeded random projection
/// `r`) with respect to every input of the graph built by `build`. Returns the
/// largest relative error over all inputs.
pub fn gradient_check<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |inputs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = run(inputs)?;
    let dims = g.value(out).dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = g.backward(out, &Tensor::new(dims, proj.clone())?)?;

    let objective = |inputs: &[Tensor<f64>]| -> f64 {
        let (g, _, out) = run(inputs).expect("perturbed graph builds");
        g.value(out).data().iter().zip(&proj).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric = numeric_gradient(
            |x| {
                let mut perturbed = inputs.to_vec();
                perturbed[k] = Tensor::new(inputs[k].dims(), x.to_vec()).expect("same dims");
                objective(&perturbed)
            },
            inputs[k].data(),
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Random tensor with entries in `[-1, 1]` kept at least `gap` away from zero,
/// so ReLU kinks are never straddled by a finite-difference step.
pub fn random_tensor(dims: [usize; 4], rng: &mut impl Rng, gap: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(dims, data).expect("dims are positive")
}
