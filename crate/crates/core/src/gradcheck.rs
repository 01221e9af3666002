//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates the forward function; it never touches
//! the reverse sweep it is checking.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest norm-wise relative error over all checked inputs.
    pub max_rel_error: f64,
    /// `(input index, relative error, analytic norm)` per input.
    pub per_input: Vec<(usize, f64, f64)>,
    pub evaluations: usize,
}

fn eval<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Compare reverse-mode gradients of the scalar `f` against central
/// differences for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    check_gradients_sampled(inputs, usize::MAX, 0, f)
}

/// Like [`check_gradients`] but probes at most `max_per_input` randomly
/// chosen coordinates of each input.
pub fn check_gradients_sampled<F>(inputs: &[Tensor], max_per_input: usize, seed: u64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::new();
    let mut evaluations = 0;
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic_full = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let idx: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_per_input).into_vec()
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &j in &idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work, &f);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work, &f);
            work[i].data_mut()[j] = orig;
            evaluations += 2;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = analytic_full.data()[j];
            diff2 += (numeric - analytic).powi(2);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel = if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale };
        per_input.push((i, rel, a2.sqrt()));
    }
    let max_rel_error = per_input.iter().map(|p| p.1).fold(0.0, f64::max);
    GradCheck {
        max_rel_error,
        per_input,
        evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x * stop_gradient-like constant path: the derivative of x*c with c
        // rebuilt from x's value as a constant is c, not 2x.
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]);
        let r = check_gradients(&[x], |g, v| {
            let c = g.constant(g.value(v[0]).clone());
            let y = g.mul(v[0], c);
            g.sum(y)
        });
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn exact_for_quadratic() {
        let x = Tensor::new(&[4], vec![0.1, 0.2, -0.3, 1.5]);
        let r = check_gradients(&[x], |g, v| {
            let y = g.square(v[0]);
            g.sum(y)
        });
        assert!(r.max_rel_error < 1e-9);
        assert_eq!(r.evaluations, 8);
    }
}
