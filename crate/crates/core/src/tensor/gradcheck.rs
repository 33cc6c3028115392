use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub seed: u64,
    /// Check at most this many randomly chosen entries per input.
    pub max_entries: Option<usize>,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// both ~0 are compared absolutely.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            seed: 0x5eed,
            max_entries: None,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Analytic gradient of the scalarized output for each input.
    pub analytic: Vec<Tensor<f64>>,
    pub error: Option<String>,
}

impl GradcheckReport {
    fn failed(tolerance: f64, msg: String) -> Self {
        Self {
            max_rel_err: f64::INFINITY,
            worst: (0, 0),
            checked: 0,
            tolerance,
            passed: false,
            analytic: Vec::new(),
            error: Some(msg),
        }
    }
}

/// Gradient check at random inputs in `[-1, 1]` drawn from a fixed seed.
pub fn gradcheck<F>(op: F, shapes: &[&[usize]], tolerance: f64) -> GradcheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let opts = GradcheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0)))
        .collect();
    gradcheck_at(op, &inputs, tolerance, &opts)
}

/// Compare the reverse-mode gradient of `op` at `inputs` with central
/// differences. Non-scalar outputs are reduced as `sum(out * R)` with a
/// fixed random `R`.
pub fn gradcheck_at<F>(
    op: F,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    opts: &GradcheckOptions,
) -> GradcheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut projection: Option<Tensor<f64>> = None;

    // evaluate the scalarized objective, building a fresh graph each time
    let mut eval = |xs: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let g = Graph::new();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = op(&g, &vars)?;
        let shape = out.shape();
        let r = projection.get_or_insert_with(|| {
            Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
        });
        let loss = if shape.iter().product::<usize>() == 1 && shape.is_empty() {
            out
        } else {
            out.mul(g.constant(r.clone()))?.sum()?
        };
        let value = loss.value().item();
        let grads = if want_grad {
            let gr = g.backward(loss)?;
            vars.iter().map(|v| gr.wrt(*v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let analytic = match eval(inputs, true) {
        Ok((_, a)) => a,
        Err(e) => return GradcheckReport::failed(tolerance, e.to_string()),
    };

    let mut pick = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut max_rel = 0.0f64;
    let mut worst = (0, 0);
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < x.len() => (0..m).map(|_| pick.gen_range(0..x.len())).collect(),
            _ => (0..x.len()).collect(),
        };
        for i in entries {
            let orig = x.data()[i];
            xs[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&xs, false);
            xs[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&xs, false);
            xs[k].data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p.0, m.0),
                (Err(e), _) | (_, Err(e)) => return GradcheckReport::failed(tolerance, e.to_string()),
            };
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            checked += 1;
            if rel > max_rel || rel.is_nan() {
                max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = (k, i);
            }
        }
    }
    GradcheckReport {
        max_rel_err: max_rel,
        worst,
        checked,
        tolerance,
        passed: max_rel < tolerance,
        analytic,
        error: None,
    }
}
