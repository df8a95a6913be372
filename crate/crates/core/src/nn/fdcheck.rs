//! Finite-difference gradient checking, shared by nn test modules.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Central finite-difference check of every element of every input against
/// the tape's adjoints. `build` must be deterministic in its inputs.
/// Relative error uses `max(1, |analytic|, |fd|)` as the denominator.
pub(crate) fn fd_check(build: &dyn Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor], tol: f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&format!("in{i}"), t.clone()))
        .collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).len(), 1, "fd_check needs a scalar loss");
    let grads = g.backward(loss);
    let h = 1e-5;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads
            .of(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for e in 0..t.len() {
            let eval = |delta: f64| {
                let mut g2 = Graph::new();
                let vars2: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, tj)| {
                        let mut tj = tj.clone();
                        if j == i {
                            tj.data_mut()[e] += delta;
                        }
                        g2.constant(tj)
                    })
                    .collect();
                let l = build(&mut g2, &vars2);
                g2.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[e];
            let denom = 1.0f64.max(an.abs()).max(fd.abs());
            assert!(
                (an - fd).abs() / denom <= tol,
                "input {i} elem {e}: analytic {an} vs fd {fd}"
            );
        }
    }
}

pub(crate) fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = crate::rng::seeded(seed);
    Tensor::uniform(shape, lo, hi, &mut rng)
}
