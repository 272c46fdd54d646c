//! Reverse-mode differentiation over a [`ModelGraph`].
//!
//! The forward pass records one [`TapeNode`] per graph node holding its output
//! and whatever the backward rule needs. Backward walks the tape in reverse,
//! accumulating parameter gradients into the [`ParamSet`].

use crate::attention::{self, AttentionParams, BodyCache, SlotMode, StandardCache};
use crate::error::{Error, Result};
use crate::graph::{self, ModelGraph, Op};
use crate::ops::{self, BatchNormParams, BnPerturbation, BnTrainCache};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics; running statistics are updated.
    Train,
    /// Batch-norm uses running statistics.
    Eval,
}

/// Source of per-layer batch-norm perturbations, sampled once per layer per forward pass.
pub trait BnNoise {
    fn sample(&mut self, layer: &str) -> BnPerturbation;
}

/// Optional interventions applied during a forward pass.
#[derive(Default)]
pub struct ForwardHooks<'a> {
    pub bn_noise: Option<&'a mut dyn BnNoise>,
    /// Attention slots (by index) replaced with a fixed vector.
    pub frozen_attention: Option<&'a BTreeMap<usize, Tensor>>,
}

#[derive(Debug)]
enum Saved {
    None,
    BnTrain(BnTrainCache),
    Standard(Box<(StandardCache, AttentionParams)>),
    Constant {
        v: Tensor,
        body: Option<Box<(BodyCache, AttentionParams)>>,
    },
}

/// One evaluated graph node.
#[derive(Debug)]
pub struct TapeNode {
    pub node: usize,
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: Tensor,
    saved: Saved,
}

/// The recorded forward pass.
#[derive(Debug)]
pub struct Tape {
    mode: Mode,
    nodes: Vec<TapeNode>,
    running_updates: Vec<(String, Tensor)>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn value(&self, node: usize) -> &Tensor {
        &self.nodes[node].output
    }

    pub fn output(&self) -> &Tensor {
        &self.nodes.last().expect("non-empty tape").output
    }

    /// Attention vectors of an attention node as `[N, C]`; constant vectors are repeated per sample.
    pub fn attention_vectors(&self, node: usize) -> Option<Tensor> {
        let n = self.nodes[node].output.shape()[0];
        match &self.nodes[node].saved {
            Saved::Standard(b) => Some(b.0.vectors.clone()),
            Saved::Constant { v, .. } => {
                let mut data = Vec::with_capacity(n * v.len());
                for _ in 0..n {
                    data.extend_from_slice(v.data());
                }
                Some(Tensor::from_parts(vec![n, v.len()], data))
            }
            _ => None,
        }
    }

    /// Running-statistic updates produced by a training-mode pass.
    pub fn running_updates(&self) -> &[(String, Tensor)] {
        &self.running_updates
    }

    pub fn apply_running_stats(&self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in &self.running_updates {
            params.set(name, t.clone())?;
        }
        Ok(())
    }
}

fn check_input(graph: &ModelGraph, x: &Tensor) -> Result<()> {
    if x.rank() != graph.input_shape.len() + 1 || x.shape()[1..] != graph.input_shape[..] {
        return Err(Error::dim(
            "forward",
            format!("input {:?} does not match [N, {:?}]", x.shape(), graph.input_shape),
        ));
    }
    Ok(())
}

pub fn forward(graph: &ModelGraph, params: &ParamSet, x: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
    forward_with(graph, params, x, mode, ForwardHooks::default())
}

pub fn forward_with(
    graph: &ModelGraph,
    params: &ParamSet,
    x: &Tensor,
    mode: Mode,
    mut hooks: ForwardHooks<'_>,
) -> Result<(Tensor, Tape)> {
    check_input(graph, x)?;
    let mut tape = Tape {
        mode,
        nodes: Vec::with_capacity(graph.nodes.len()),
        running_updates: Vec::new(),
    };
    for (i, node) in graph.nodes.iter().enumerate() {
        let (output, saved, updates) =
            eval_node(graph, params, node, &tape, x, mode, &mut hooks).map_err(|e| e.in_layer(&node.name))?;
        tape.running_updates.extend(updates);
        tape.nodes.push(TapeNode {
            node: i,
            op: node.op.kind_name(),
            inputs: node.inputs.clone(),
            output,
            saved,
        });
    }
    Ok((tape.output().clone(), tape))
}

/// Node output, its backward cache and any running-statistic updates.
type NodeEval = (Tensor, Saved, Vec<(String, Tensor)>);

fn eval_node(
    graph: &ModelGraph,
    params: &ParamSet,
    node: &graph::Node,
    tape: &Tape,
    x: &Tensor,
    mode: Mode,
    hooks: &mut ForwardHooks<'_>,
) -> Result<NodeEval> {
    let input = |k: usize| &tape.nodes[node.inputs[k]].output;
    let name = &node.name;
    let mut updates = Vec::new();
    let (out, saved) = match &node.op {
        Op::Input => (x.clone(), Saved::None),
        Op::Conv2d { spec, bias, .. } => {
            let w = params.get(&graph::weight_name(name))?;
            let b = if *bias { Some(params.get(&graph::bias_name(name))?) } else { None };
            (ops::conv2d(input(0), w, b, *spec)?, Saved::None)
        }
        Op::BatchNorm { eps, momentum, .. } => {
            let gamma = params.get(&graph::gamma_name(name))?;
            let beta = params.get(&graph::beta_name(name))?;
            match mode {
                Mode::Train => {
                    let (y, cache) = ops::batchnorm_train(input(0), gamma, beta, *eps)?;
                    let rm = params.get(&graph::running_mean_name(name))?;
                    let rv = params.get(&graph::running_var_name(name))?;
                    let (n, _, spatial) = ops::channel_layout(input(0), "batchnorm")?;
                    let count = (n * spatial) as f64;
                    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    let new_mean = rm
                        .data()
                        .iter()
                        .zip(&cache.batch_mean)
                        .map(|(r, b)| momentum * r + (1.0 - momentum) * b)
                        .collect();
                    let new_var = rv
                        .data()
                        .iter()
                        .zip(&cache.batch_var)
                        .map(|(r, b)| momentum * r + (1.0 - momentum) * b * unbias)
                        .collect();
                    updates.push((graph::running_mean_name(name), Tensor::new(rm.shape().to_vec(), new_mean)?));
                    updates.push((graph::running_var_name(name), Tensor::new(rv.shape().to_vec(), new_var)?));
                    (y, Saved::BnTrain(cache))
                }
                Mode::Eval => {
                    let p = BatchNormParams {
                        mean: params.get(&graph::running_mean_name(name))?,
                        var: params.get(&graph::running_var_name(name))?,
                        gamma,
                        beta,
                        eps: *eps,
                    };
                    let noise = hooks.bn_noise.as_mut().map(|h| h.sample(name));
                    (ops::batchnorm_infer_perturbed(input(0), &p, noise)?, Saved::None)
                }
            }
        }
        Op::Relu => (ops::relu(input(0)), Saved::None),
        Op::AvgPool2 => (ops::avg_pool2(input(0))?, Saved::None),
        Op::GlobalAvgPool => (ops::global_avg_pool(input(0))?, Saved::None),
        Op::Flatten => {
            let t = input(0);
            let n = t.shape()[0];
            (t.clone().reshape(vec![n, t.len() / n])?, Saved::None)
        }
        Op::Linear { bias, .. } => {
            let w = params.get(&graph::weight_name(name))?;
            let b = if *bias { Some(params.get(&graph::bias_name(name))?) } else { None };
            (ops::linear(input(0), w, b)?, Saved::None)
        }
        Op::Add => (input(0).add(input(1))?, Saved::None),
        Op::Attention { slot } => {
            let s = &graph.slots[*slot];
            let xin = input(0);
            if let Some(v) = hooks.frozen_attention.and_then(|m| m.get(slot)) {
                (ops::channel_mul(xin, v)?, Saved::Constant { v: v.clone(), body: None })
            } else {
                match s.mode {
                    SlotMode::Standard => {
                        let theta = s.body_params(params)?;
                        let (y, cache) = attention::attn_standard_cached(&s.kind, &theta, xin)?;
                        (y, Saved::Standard(Box::new((cache, theta))))
                    }
                    SlotMode::Asr { .. } => {
                        let theta = s.body_params(params)?;
                        let psi = params.get(&s.psi_name())?;
                        let (v, cache) = attention::asr_body_vector(&theta, s.channels, psi)?;
                        (
                            ops::channel_mul(xin, &v)?,
                            Saved::Constant {
                                v,
                                body: Some(Box::new((cache, theta))),
                            },
                        )
                    }
                    SlotMode::NoBody { .. } => {
                        let v = attention::no_body_vector(params.get(&s.psi_name())?);
                        (ops::channel_mul(xin, &v)?, Saved::Constant { v, body: None })
                    }
                }
            }
        }
    };
    Ok((out, saved, updates))
}

fn accumulate(grads: &mut [Option<Tensor>], node: usize, g: Tensor) -> Result<()> {
    match &mut grads[node] {
        Some(existing) => {
            existing.expect_same_shape(&g, "gradient accumulation")?;
            existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Backpropagates `loss_grad` (the gradient of a scalar loss with respect to
/// the graph output) through a training-mode tape. Parameter gradients are
/// accumulated into `params`; the gradient with respect to the graph input is
/// returned.
pub fn backward(graph: &ModelGraph, params: &mut ParamSet, tape: &Tape, loss_grad: &Tensor) -> Result<Tensor> {
    if tape.mode != Mode::Train {
        return Err(Error::State("backward requires a tape recorded in train mode".into()));
    }
    if tape.nodes.len() != graph.nodes.len() {
        return Err(Error::State("tape does not belong to this graph".into()));
    }
    tape.output().expect_same_shape(loss_grad, "backward")?;
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    grads[graph.output()] = Some(loss_grad.clone());

    for i in (1..graph.nodes.len()).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &graph.nodes[i];
        backward_node(graph, params, tape, i, &g, &mut grads).map_err(|e| e.in_layer(&node.name))?;
    }
    Ok(grads[0]
        .take()
        .unwrap_or_else(|| Tensor::zeros(tape.nodes[0].output.shape())))
}

fn backward_node(
    graph: &ModelGraph,
    params: &mut ParamSet,
    tape: &Tape,
    i: usize,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let node = &graph.nodes[i];
    let name = &node.name;
    let src = node.inputs.first().copied().unwrap_or(0);
    let xin = &tape.nodes[src].output;
    match (&node.op, &tape.nodes[i].saved) {
        (Op::Conv2d { spec, bias, .. }, _) => {
            let w = params.get(&graph::weight_name(name))?.clone();
            let cg = ops::conv2d_backward(xin, &w, *spec, g, true)?;
            params.accumulate_grad(&graph::weight_name(name), &cg.kernel)?;
            if *bias {
                params.accumulate_grad(&graph::bias_name(name), &cg.bias)?;
            }
            accumulate(grads, src, cg.input.expect("requested"))?;
        }
        (Op::BatchNorm { .. }, Saved::BnTrain(cache)) => {
            let gamma = params.get(&graph::gamma_name(name))?.clone();
            let (gx, gg, gb) = ops::batchnorm_train_backward(cache, &gamma, g)?;
            params.accumulate_grad(&graph::gamma_name(name), &gg)?;
            params.accumulate_grad(&graph::beta_name(name), &gb)?;
            accumulate(grads, src, gx)?;
        }
        (Op::Relu, _) => accumulate(grads, src, ops::relu_backward(xin, g)?)?,
        (Op::AvgPool2, _) => accumulate(grads, src, ops::avg_pool2_backward(xin.shape(), g)?)?,
        (Op::GlobalAvgPool, _) => accumulate(grads, src, ops::global_avg_pool_backward(xin.shape(), g)?)?,
        (Op::Flatten, _) => accumulate(grads, src, g.clone().reshape(xin.shape().to_vec())?)?,
        (Op::Linear { bias, .. }, _) => {
            let w = params.get(&graph::weight_name(name))?.clone();
            let (gx, gw, gb) = ops::linear_backward(xin, &w, g)?;
            params.accumulate_grad(&graph::weight_name(name), &gw)?;
            if *bias {
                params.accumulate_grad(&graph::bias_name(name), &gb)?;
            }
            accumulate(grads, src, gx)?;
        }
        (Op::Add, _) => {
            accumulate(grads, node.inputs[0], g.clone())?;
            accumulate(grads, node.inputs[1], g.clone())?;
        }
        (Op::Attention { slot }, Saved::Standard(b)) => {
            let s = &graph.slots[*slot];
            let (cache, theta) = b.as_ref();
            let (gx, gtheta) = attention::attn_standard_backward(&s.kind, theta, xin, cache, g)?;
            s.accumulate_body_grads(params, &gtheta)?;
            accumulate(grads, src, gx)?;
        }
        (Op::Attention { slot }, Saved::Constant { v, body }) => {
            let s = &graph.slots[*slot];
            let gv = ops::channel_mul_vector_grad(xin, g)?;
            accumulate(grads, src, ops::channel_mul(g, v)?)?;
            match (s.mode, body) {
                (SlotMode::Asr { .. }, Some(b)) => {
                    let (cache, theta) = b.as_ref();
                    let (gpsi, gtheta) = attention::asr_body_backward(theta, cache, &gv);
                    s.accumulate_body_grads(params, &gtheta)?;
                    params.accumulate_grad(&s.psi_name(), &Tensor::from_vec(gpsi)?)?;
                }
                (SlotMode::NoBody { .. }, None) => {
                    let gpsi: Vec<f64> = gv.iter().zip(v.data()).map(|(g, v)| g * v * (1.0 - v)).collect();
                    params.accumulate_grad(&s.psi_name(), &Tensor::from_vec(gpsi)?)?;
                }
                // replaced by a fixed vector: nothing to train upstream of v
                _ => {}
            }
        }
        (op, _) => {
            return Err(Error::State(format!("no backward rule for {} in this tape", op.kind_name())));
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", format!("{} labels for batch of {n}", labels.len())));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * k];
    for (s, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        if label >= k {
            return Err(Error::Label { label, classes: k });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (j, z) in row.iter().enumerate() {
            let p = (z - log_z).exp();
            grad[s * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, k], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    #[test]
    fn empty_graph_is_identity() {
        let g = GraphBuilder::new(vec![3], 3).finish().unwrap();
        let p = g.init_params(0).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (y, _) = forward(&g, &p, &x, Mode::Eval).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn identity_linear() {
        let mut b = GraphBuilder::new(vec![2], 2);
        b.push("fc", Op::Linear { in_features: 2, out_features: 2, bias: true }, vec![0]);
        let g = b.finish().unwrap();
        let mut p = g.init_params(0).unwrap();
        p.set("fc.weight", Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap()).unwrap();
        p.set("fc.bias", Tensor::zeros(&[2])).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.25, -4.0]).unwrap();
        assert_eq!(forward(&g, &p, &x, Mode::Eval).unwrap().0, x);
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        let mut b = GraphBuilder::new(vec![3], 2);
        b.push("fc", Op::Linear { in_features: 3, out_features: 2, bias: false }, vec![0]);
        let g = b.finish().unwrap();
        let mut p = g.init_params(1).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let (_, tape) = forward(&g, &p, &x, Mode::Train).unwrap();
        backward(&g, &mut p, &tape, &Tensor::ones(&[1, 2])).unwrap();
        let gw = &p.entry("fc.weight").unwrap().grad;
        assert_eq!(gw.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn eval_tape_cannot_backprop() {
        let g = GraphBuilder::new(vec![3], 3).finish().unwrap();
        let mut p = g.init_params(0).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        let (_, tape) = forward(&g, &p, &x, Mode::Eval).unwrap();
        assert!(matches!(backward(&g, &mut p, &tape, &x), Err(Error::State(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(&Tensor::zeros(&[2, 5]), &[0, 3]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
        let (l, _) = cross_entropy(&Tensor::new(vec![1, 3], vec![20.0, 0.0, 0.0]).unwrap(), &[0]).unwrap();
        assert!(l < 1e-8);
        assert!(matches!(cross_entropy(&Tensor::zeros(&[1, 3]), &[3]), Err(Error::Label { .. })));
        let z = Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 1.0, 1.5, -2.0]).unwrap();
        let labels = [2, 0];
        let (l, _) = cross_entropy(&z, &labels).unwrap();
        let mut want = 0.0;
        for (s, &y) in labels.iter().enumerate() {
            let row = &z.data()[s * 3..s * 3 + 3];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            want += -(row[y].exp() / denom).ln();
        }
        assert!((l - want / 2.0).abs() < 1e-14);
    }
}
