//! Propagation of an input perturbation through a residual chain
//! `x_{t+1} = x_t + relu(W_t x_t) ⊙ v_t`.
//!
//! Since relu is 1-Lipschitz and `0 < v_t ≤ α_t`, each block satisfies
//! `ε_{t+1} ≤ ε_t (1 + α_t ‖W_t‖₂)`, and the whole chain `ε_L ≤ ε·M` with
//! `M = ∏ (1 + α_t ‖W_t‖₂)`.

use crate::attention;
use crate::autodiff::{self, Mode};
use crate::error::{Error, Result};
use crate::graph::{self, ModelGraph, Op};
use crate::params::ParamSet;
use crate::spectral::{spectral_norm, DenseOperator};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Power-iteration budget for `‖W_t‖₂`; the bound is only as sharp as this estimate.
const NORM_ITERS: usize = 5000;
const NORM_TOL: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationRow {
    pub t: usize,
    /// Distance between the two trajectories entering block `t`.
    pub eps_in: f64,
    /// Distance leaving block `t`.
    pub eps_out: f64,
    pub alpha: f64,
    pub w_norm: f64,
}

impl PerturbationRow {
    pub fn factor(&self) -> f64 {
        1.0 + self.alpha * self.w_norm
    }

    /// `eps_out ≤ eps_in · factor · (1 + slack)`.
    pub fn holds(&self, slack: f64) -> bool {
        self.eps_out <= self.eps_in * self.factor() * (1.0 + slack)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationTrace {
    pub eps: f64,
    pub rows: Vec<PerturbationRow>,
}

impl PerturbationTrace {
    /// `∏ (1 + α_t ‖W_t‖₂)`.
    pub fn bound(&self) -> f64 {
        self.rows.iter().map(PerturbationRow::factor).product()
    }

    /// The same product with every `α_t` set to 1, as for a chain without attention.
    pub fn bound_without_attention(&self) -> f64 {
        self.rows.iter().map(|r| 1.0 + r.w_norm).product()
    }

    pub fn final_eps(&self) -> f64 {
        self.rows.last().map_or(self.eps, |r| r.eps_out)
    }

    /// Every per-block bound and the product bound hold within `slack`.
    pub fn holds(&self, slack: f64) -> bool {
        self.rows.iter().all(|r| r.holds(slack)) && self.final_eps() <= self.eps * self.bound() * (1.0 + slack)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "eps_t", "alpha_t", "w_norm", "factor", "eps_next"])?;
        for r in &self.rows {
            w.write_record([
                r.t.to_string(),
                r.eps_in.to_string(),
                r.alpha.to_string(),
                r.w_norm.to_string(),
                r.factor().to_string(),
                r.eps_out.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// One block of a conforming chain.
struct Block {
    linear: usize,
    slots: Vec<usize>,
    add: usize,
}

/// Splits a graph into `linear -> relu -> attention* -> add(x_t, ·)` blocks,
/// rejecting anything else.
fn blocks(graph: &ModelGraph) -> Result<Vec<Block>> {
    let reject = |detail: String| Error::Graph(format!("not a residual chain: {detail}"));
    let d = match graph.input_shape.as_slice() {
        [d] => *d,
        s => return Err(reject(format!("input shape {s:?} is not a vector"))),
    };
    let nodes = &graph.nodes;
    let mut out = Vec::new();
    let mut x = 0;
    let mut i = 1;
    while i < nodes.len() {
        let linear = i;
        match nodes[i].op {
            Op::Linear {
                in_features,
                out_features,
                bias: false,
            } if in_features == d && out_features == d && nodes[i].inputs == [x] => {}
            _ => return Err(reject(format!("{} is not a square bias-free linear layer on x_t", nodes[i].name))),
        }
        i += 1;
        if nodes.get(i).map(|n| (&n.op, &n.inputs)) != Some((&Op::Relu, &vec![linear])) {
            return Err(reject(format!("{} is not followed by relu", nodes[linear].name)));
        }
        let mut last = i;
        i += 1;
        let mut slots = Vec::new();
        while let Some(Op::Attention { slot }) = nodes.get(i).map(|n| &n.op) {
            if nodes[i].inputs != [last] {
                return Err(reject(format!("{} does not continue the branch", nodes[i].name)));
            }
            if !graph.slots[*slot].is_constant() {
                return Err(reject(format!("{} is input-dependent", nodes[i].name)));
            }
            slots.push(*slot);
            last = i;
            i += 1;
        }
        match nodes.get(i) {
            Some(n) if n.op == Op::Add && (n.inputs == [x, last] || n.inputs == [last, x]) => {}
            _ => return Err(reject(format!("block at {} does not end in a residual add", nodes[linear].name))),
        }
        out.push(Block { linear, slots, add: i });
        x = i;
        i += 1;
    }
    if out.is_empty() {
        return Err(reject("no blocks".into()));
    }
    Ok(out)
}

/// Runs `x0` and `x0 + eps·u` (u uniform on the unit sphere, seeded) through
/// the chain and records the perturbation at every block boundary.
pub fn perturb_trace(graph: &ModelGraph, params: &ParamSet, x0: &Tensor, eps: f64, seed: u64) -> Result<PerturbationTrace> {
    let blocks = blocks(graph)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("perturbation size {eps} must be positive")));
    }
    let d = graph.input_shape[0];
    if x0.len() != d {
        return Err(Error::dim("perturb_trace", format!("x0 has {} elements, chain width is {d}", x0.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    u.iter_mut().for_each(|a| *a /= norm);

    let mut pair = x0.data().to_vec();
    pair.extend(x0.data().iter().zip(&u).map(|(a, b)| a + eps * b));
    let (_, tape) = autodiff::forward(graph, params, &Tensor::new(vec![2, d], pair)?, Mode::Eval)?;
    let distance = |node: usize| {
        let v = tape.value(node);
        v.sample(0).iter().zip(v.sample(1)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };

    let mut rows = Vec::with_capacity(blocks.len());
    let mut eps_in = distance(0);
    for (t, b) in blocks.iter().enumerate() {
        let mut v = vec![1.0; d];
        for &s in &b.slots {
            let vs = attention::asr_vector(&graph.slots[s], params)?;
            v.iter_mut().zip(vs.data()).for_each(|(a, b)| *a *= b);
        }
        let alpha = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w = params.get(&graph::weight_name(&graph.nodes[b.linear].name))?;
        let w_norm = spectral_norm(&DenseOperator::new(w)?, NORM_ITERS, NORM_TOL);
        let eps_out = distance(b.add);
        rows.push(PerturbationRow {
            t,
            eps_in,
            eps_out,
            alpha,
            w_norm,
        });
        eps_in = eps_out;
    }
    Ok(PerturbationTrace { eps, rows })
}
