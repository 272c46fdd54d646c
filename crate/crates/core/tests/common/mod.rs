#![allow(dead_code)]

use asr_core::autodiff::{backward, forward, Mode};
use asr_core::graph::{ModelGraph, Op};
use asr_core::params::{ParamKind, ParamSet};
use asr_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Outer central-difference step; the estimate is Richardson-extrapolated from `h` and `h/2`.
pub const FD_STEP: f64 = 1e-4;

/// Gradients below this magnitude are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`: relative error, except that a
/// vanishing gradient must match to `tol · GRAD_FLOOR` absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Output plus the ReLU input sign patterns; a finite difference is only
/// valid if no pattern changes between the two evaluations.
fn eval_with_masks(graph: &ModelGraph, params: &ParamSet, x: &Tensor) -> (Vec<Vec<bool>>, Tensor) {
    let (y, tape) = forward(graph, params, x, Mode::Train).unwrap();
    let masks = graph
        .nodes
        .iter()
        .filter(|n| matches!(n.op, Op::Relu))
        .map(|n| tape.value(n.inputs[0]).data().iter().map(|&v| v > 0.0).collect())
        .collect();
    (masks, y)
}

fn projected(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Compares backward against central differences of `L = Σ r ⊙ f(x)` for every
/// trainable parameter entry and every input entry (train mode).
pub fn check_graph(graph: &ModelGraph, params: &ParamSet, x: &Tensor, seed: u64) -> GradReport {
    let mut rng = rng(seed);
    let (y, tape) = forward(graph, params, x, Mode::Train).unwrap();
    let r = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
    let mut p = params.clone();
    p.zero_grads();
    let gx = backward(graph, &mut p, &tape, &r).unwrap();

    let mut report = GradReport::default();
    // evaluations at +h, -h, +h/2, -h/2; all four must share ReLU patterns
    let mut record = |analytic: f64, evals: [(Vec<Vec<bool>>, Tensor); 4], at: String| {
        if evals.iter().any(|e| e.0 != evals[0].0) {
            report.skipped_kinks += 1;
            return;
        }
        let f: Vec<f64> = evals.iter().map(|e| projected(&e.1, &r)).collect();
        let d_h = (f[0] - f[1]) / (2.0 * FD_STEP);
        let d_half = (f[2] - f[3]) / FD_STEP;
        let numeric = (4.0 * d_half - d_h) / 3.0;
        let e = rel_err(analytic, numeric);
        report.checked += 1;
        if e > report.worst {
            report.worst = e;
            report.worst_at = format!("{at}: analytic {analytic:e} numeric {numeric:e}");
        }
    };
    let steps = [FD_STEP, -FD_STEP, FD_STEP / 2.0, -FD_STEP / 2.0];

    let names: Vec<String> = params
        .iter()
        .filter(|(_, e)| e.kind != ParamKind::Buffer)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let base = params.get(&name).unwrap().clone();
        let grad = p.entry(&name).unwrap().grad.clone();
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut q = params.clone();
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                q.set(&name, t).unwrap();
                eval_with_masks(graph, &q, x)
            };
            record(grad.data()[i], steps.map(eval), format!("{name}[{i}]"));
        }
    }
    for i in 0..x.len() {
        let eval = |delta: f64| {
            let mut t = x.clone();
            t.data_mut()[i] += delta;
            eval_with_masks(graph, params, &t)
        };
        record(gx.data()[i], steps.map(eval), format!("input[{i}]"));
    }
    report
}
