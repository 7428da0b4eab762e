//! Shared helpers for the acceptance suite: an alignment-enumeration oracle
//! for the transducer loss and a central-difference gradient checker.

use dualmode_core::tape::{Tape, Var};
use dualmode_core::{Result, Tensor};

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Transducer loss by summing every monotone alignment explicitly. A path
/// starts at (t=0, u=0), may emit label u+1 (staying on frame t) or consume a
/// blank (advancing t), and must leave (T-1, U) with a final blank. Only
/// feasible for tiny lattices.
pub fn brute_force_rnnt_loss(log_probs: &Tensor, labels: &[usize], blank: usize) -> f64 {
    let shape = log_probs.shape();
    let (t_len, u_len, v_len) = (shape[0], shape[1], shape[2]);
    assert_eq!(u_len, labels.len() + 1);
    let lp = |t: usize, u: usize, v: usize| log_probs.data()[(t * u_len + u) * v_len + v];

    let mut terminals = Vec::new();
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, acc)) = stack.pop() {
        if t == t_len - 1 && u == u_len - 1 {
            terminals.push(acc + lp(t, u, blank));
        }
        if u + 1 < u_len {
            stack.push((t, u + 1, acc + lp(t, u, labels[u])));
        }
        if t + 1 < t_len && u < u_len {
            stack.push((t + 1, u, acc + lp(t, u, blank)));
        }
    }
    -logsumexp(&terminals)
}

/// Worst relative error between reverse-mode gradients and central finite
/// differences at h = 1e-6, checking every coordinate of every input. The
/// builder must be a pure function of the input tensors.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor], tol: f64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars).unwrap_or_else(|e| panic!("{name}: build failed: {e}"));
        tape.backward(loss).unwrap_or_else(|e| panic!("{name}: backward failed: {e}"));
        vars.iter().map(|&v| tape.grad(v).to_vec()).collect::<Vec<_>>()
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).data()[0]
    };

    let h = 1e-6;
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads[ti][i];
            let rel = (numeric - analytic).abs()
                / f64::max(1.0, f64::max(numeric.abs(), analytic.abs()));
            assert!(
                rel <= tol,
                "{name}: input {ti} coord {i}: analytic {analytic} vs numeric {numeric} (rel {rel:.3e})"
            );
            worst = worst.max(rel);
        }
    }
    worst
}
