//! Finite-difference gradient checking for the whole model.
//!
//! The analytic route runs one tracked forward and a backward pass; the
//! numeric route re-evaluates the loss twice per parameter element with
//! central differences (ε = 1e-4 by default) and never touches the backward
//! code, so it is an independent oracle for it. Comparison uses
//!
//! ```text
//! rel = |analytic − numeric| / (1e-3 + max(|analytic|, |numeric|))
//! ```
//!
//! whose guarded denominator keeps finite-difference noise on near-zero
//! gradients from registering as error. A tensor fails when its worst
//! element exceeds the threshold (1e-3 by default).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{bind, build, forward, Parameters};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.threshold
    }

    /// One line per parameter tensor plus a verdict.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for row in &self.rows {
            let mark = if row.max_rel_err < self.threshold {
                "ok"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "{:width$}  {:>12.3e}  {mark}\n",
                row.name, row.max_rel_err
            ));
        }
        out.push_str(&format!(
            "max relative error {:.3e} (threshold {:.1e}): {}\n",
            self.max_rel_err(),
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Eval-mode scalar loss: cross-entropy of the ensemble logits.
fn loss_value(
    params: &Parameters,
    config: &ModelConfig,
    image: &Tensor,
    label: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&mut tape, &bound, config, image, false, &mut rng)?;
    let loss = tape.cross_entropy(&Var::constant(out.ensemble.value().clone()), label)?;
    Ok(loss.value().data()[0])
}

/// Analytic gradients of the eval-mode loss for every parameter, in
/// traversal order.
pub fn analytic_grads(
    params: &Parameters,
    config: &ModelConfig,
    image: &Tensor,
    label: usize,
) -> Result<Vec<(String, Tensor)>> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&mut tape, &bound, config, image, false, &mut rng)?;
    let loss = tape.cross_entropy(&out.ensemble, label)?;
    let grads = tape.backward(&loss)?;
    let mut collected = Vec::new();
    bound.visit(&mut |name, var| {
        let g = grads
            .get(var)
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()));
        collected.push((name, g));
    });
    Ok(collected)
}

/// Central-difference gradients of the same loss, touching only forward
/// evaluations.
pub fn numeric_grads(
    params: &Parameters,
    config: &ModelConfig,
    image: &Tensor,
    label: usize,
    epsilon: f64,
) -> Result<Vec<(String, Tensor)>> {
    let names: Vec<String> = params.flatten().iter().map(|(n, _)| n.clone()).collect();
    let mut out = Vec::with_capacity(names.len());
    let mut work = params.clone();
    for (tensor_idx, name) in names.iter().enumerate() {
        let numel = params.flatten()[tensor_idx].1.numel();
        let shape = params.flatten()[tensor_idx].1.shape().to_vec();
        let mut grad = vec![0.0; numel];
        for elem in 0..numel {
            let original = set_element(&mut work, tensor_idx, elem, |v| v + epsilon);
            let plus = loss_value(&work, config, image, label)?;
            set_element(&mut work, tensor_idx, elem, |_| original - epsilon);
            let minus = loss_value(&work, config, image, label)?;
            set_element(&mut work, tensor_idx, elem, |_| original);
            grad[elem] = (plus - minus) / (2.0 * epsilon);
        }
        out.push((name.clone(), Tensor::from_vec(shape, grad)?));
    }
    Ok(out)
}

/// Mutates one element of the `tensor_idx`-th parameter, returning its
/// previous value.
fn set_element(
    params: &mut Parameters,
    tensor_idx: usize,
    elem: usize,
    f: impl Fn(f64) -> f64,
) -> f64 {
    let mut i = 0;
    let mut previous = 0.0;
    *params = params.map(&mut |t: &Tensor| {
        let out = if i == tensor_idx {
            let mut t = t.clone();
            let data = t.data_mut();
            previous = data[elem];
            data[elem] = f(previous);
            t
        } else {
            t.clone()
        };
        i += 1;
        out
    });
    previous
}

/// Per-tensor worst relative error between two gradient sets.
pub fn compare_grads(
    analytic: &[(String, Tensor)],
    numeric: &[(String, Tensor)],
    threshold: f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let rows = analytic
        .iter()
        .zip(numeric)
        .map(|((name, a), (name2, n))| {
            assert_eq!(name, name2);
            let max_rel_err = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&av, &nv)| (av - nv).abs() / (1e-3 + av.abs().max(nv.abs())))
                .fold(0.0, f64::max);
            GradCheckRow {
                name: name.clone(),
                max_rel_err,
            }
        })
        .collect();
    GradCheckReport { rows, threshold }
}

/// Builds the configured model, draws a seeded random image and label, and
/// checks every parameter gradient against central differences.
pub fn gradcheck(config: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    gradcheck_with(config, seed, DEFAULT_EPSILON, DEFAULT_THRESHOLD)
}

pub fn gradcheck_with(
    config: &ModelConfig,
    seed: u64,
    epsilon: f64,
    threshold: f64,
) -> Result<GradCheckReport> {
    config.validate()?;
    let params = build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A);
    let s = config.base_input_side;
    let image = Tensor::from_fn(vec![3, s, s], |_| rng.gen::<f64>());
    let label = rng.gen_range(0..config.num_classes);
    let analytic = analytic_grads(&params, config, &image, label)?;
    let numeric = numeric_grads(&params, config, &image, label, epsilon)?;
    Ok(compare_grads(&analytic, &numeric, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::micro_gradcheck;

    #[test]
    fn gradient_flows_to_every_parameter() {
        // generic init: no parameter's gradient should be identically zero
        let config = micro_gradcheck(4);
        let params = build(&config, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = config.base_input_side;
        let image = Tensor::from_fn(vec![3, s, s], |_| rng.gen::<f64>());
        let grads = analytic_grads(&params, &config, &image, 1).unwrap();
        for (name, g) in grads {
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{name} has an identically zero gradient"
            );
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let config = micro_gradcheck(3);
        let params = build(&config, 2).unwrap();
        let image = Tensor::filled(vec![3, 8, 8], 0.3);
        let analytic = analytic_grads(&params, &config, &image, 0).unwrap();
        let mut corrupted = analytic.clone();
        // poison one tensor's gradient
        let (_, t) = &mut corrupted[3];
        let mut bad = t.clone();
        bad.data_mut()[0] += 0.5;
        *t = bad;
        let report = compare_grads(&corrupted, &analytic, DEFAULT_THRESHOLD);
        assert!(!report.passed());
        let clean = compare_grads(&analytic, &analytic, DEFAULT_THRESHOLD);
        assert!(clean.passed());
    }

    #[test]
    fn report_is_deterministic_under_seed() {
        // spot-check on a few tensors only to stay quick in every profile:
        // full-model runs live in the acceptance suite
        let config = micro_gradcheck(3);
        let params = build(&config, 4).unwrap();
        let image = Tensor::from_fn(vec![3, 8, 8], |i| ((i * 37 % 101) as f64) / 101.0);
        let a = analytic_grads(&params, &config, &image, 2).unwrap();
        let b = analytic_grads(&params, &config, &image, 2).unwrap();
        for ((n1, t1), (_, t2)) in a.iter().zip(&b) {
            assert!(t1.bit_eq(t2), "{n1}");
        }
    }
}
