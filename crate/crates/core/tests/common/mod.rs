#![allow(dead_code)]

use trajclust::numerics::{Tape, Tensor, Var};

/// Central finite-difference check of a scalar function of several leaf
/// tensors. Returns the worst norm-wise relative error over the leaves.
pub fn fd_max_rel_error<F>(inputs: &[Tensor], step: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars);
    let grads = tape.backward(root).expect("backward");

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.value(root).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= step;
            numeric[k] = (eval(&plus) - eval(&minus)) / (2.0 * step);
        }
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(1e-8f64, |m, v| m.max(v.abs()));
        worst = worst.max(diff / scale);
    }
    worst
}
