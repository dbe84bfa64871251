//! Central-difference gradient verification in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, Tensor, Var};

/// Uniform(-1, 1) tensor from a fixed seed.
pub fn random_tensor<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen_range(-1.0..1.0)))
}

/// Default finite-difference step.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Evaluates the scalar projection `sum(out * proj)` of the closure output.
fn project(
    inputs: &[Tensor<f64>],
    build: &impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    proj: Option<&Tensor<f64>>,
) -> (f64, Tensor<f64>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let value = g.value(out).clone();
    let loss = match proj {
        Some(p) => value.data().iter().zip(p.data()).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    (loss, value)
}

/// Per-input analytic gradients of `sum(out * proj)`.
fn analytic(
    inputs: &[Tensor<f64>],
    build: &impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    proj: &Tensor<f64>,
) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let p = g.constant(proj.clone());
    let prod = g.mul(out, p).expect("projection shape");
    let loss = g.sum(prod);
    let grads = g.backward(loss).expect("scalar loss");
    inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect()
}

/// Worst element-wise relative error between analytic and central-difference
/// gradients, over every input element:
/// `|a - n| / max(1e-8, |a| + |n|)`.
///
/// The closure may return a tensor of any shape; it is reduced against a
/// fixed random projection so every output element contributes.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    eps: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    gradcheck_report(inputs, eps, build).max_rel_error
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

pub fn gradcheck_report(
    inputs: &[Tensor<f64>],
    eps: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradcheckReport {
    let (_, out) = project(inputs, &build, None);
    let proj = random_tensor::<f64>(out.shape(), 0x9e37_79b9);
    let grads = analytic(inputs, &build, &proj);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            probe[ti].data_mut()[ei] = orig + eps;
            let (plus, _) = project(&probe, &build, Some(&proj));
            probe[ti].data_mut()[ei] = orig - eps;
            let (minus, _) = project(&probe, &build, Some(&proj));
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[ti].data()[ei];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > report.max_rel_error {
                report = GradcheckReport {
                    max_rel_error: rel,
                    worst: (ti, ei),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let x = random_tensor(&[3, 4], 1);
        let err = gradcheck(&[x], DEFAULT_EPS, |g, v| g.scale(v[0], 2.5));
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_missing_gradient() {
        // An op that drops its input gradient must fail the check.
        let x = random_tensor(&[4], 2);
        let err = gradcheck(&[x], DEFAULT_EPS, |g, v| {
            let c = g.constant(g.value(v[0]).clone());
            g.add(c, c).unwrap()
        });
        assert!(err > 0.5, "{err}");
    }
}
