use ndarray::Array3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, forward, ForwardOutput, OutputGrads, PredictorParams};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    pub tolerance: f64,
    /// Parameters to probe; all of them when ≥ the parameter count.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            samples: 200,
            seed: 0,
            floor: 1e-6,
        }
    }
}

/// A loss evaluated on network outputs.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    /// One entry per input stack.
    pub grads: Vec<OutputGrads>,
    /// Hash of every piecewise branch the loss took; a change means a kink
    /// was crossed.
    pub regime: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or loss kink.
    pub skipped: usize,
    pub passed: bool,
}

fn evaluate<L>(params: &PredictorParams, inputs: &[Array3<f64>], loss_fn: &L) -> Result<(f64, u64)>
where
    L: Fn(&[ForwardOutput]) -> Result<LossEval>,
{
    let mut outs = Vec::with_capacity(inputs.len());
    let mut sig: u64 = 0;
    for x in inputs {
        let (o, cache) = forward(x, params)?;
        sig = sig.rotate_left(17) ^ cache.activation_signature();
        outs.push(o);
    }
    let eval = loss_fn(&outs)?;
    Ok((eval.value, sig.rotate_left(7) ^ eval.regime))
}

/// Compares backprop against central differences on a random subset of
/// parameters. `loss_fn` must be deterministic.
pub fn grad_check<L>(
    params: &PredictorParams,
    inputs: &[Array3<f64>],
    loss_fn: L,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: Fn(&[ForwardOutput]) -> Result<LossEval>,
{
    let mut outs = Vec::new();
    let mut caches = Vec::new();
    for x in inputs {
        let (o, c) = forward(x, params)?;
        outs.push(o);
        caches.push(c);
    }
    let eval = loss_fn(&outs)?;
    let mut analytic = params.zeros_like();
    for (cache, g) in caches.iter().zip(&eval.grads) {
        analytic.add_assign(&backward(cache, params, g, false)?.0);
    }
    let (_, base_sig) = evaluate(params, inputs, &loss_fn)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let indices: Vec<usize> = if opts.samples >= params.len() {
        (0..params.len()).collect()
    } else {
        sample(&mut rng, params.len(), opts.samples).into_vec()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        passed: false,
    };
    let mut probe = params.clone();
    for k in indices {
        let orig = probe.data[k];
        probe.data[k] = orig + opts.step;
        let (plus, sig_p) = evaluate(&probe, inputs, &loss_fn)?;
        probe.data[k] = orig - opts.step;
        let (minus, sig_m) = evaluate(&probe, inputs, &loss_fn)?;
        probe.data[k] = orig;
        if sig_p != base_sig || sig_m != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic.data[k];
        let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(opts.floor);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    report.passed = report.checked > 0 && report.max_rel_error < opts.tolerance;
    Ok(report)
}
