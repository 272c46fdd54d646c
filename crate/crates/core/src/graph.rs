//! Layer graphs with named parameter slots and attention attachment points.

use crate::attention::{AttentionSlot, SlotMode};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamSet};
use crate::tensor::{ConvSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

/// Where an attention slot sits inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum PositionTag {
    AfterConv1,
    AfterBn1,
    /// Default placement.
    #[default]
    AfterLastBn,
    AfterRelu,
}

impl PositionTag {
    pub const ALL: [PositionTag; 4] = [
        PositionTag::AfterConv1,
        PositionTag::AfterBn1,
        PositionTag::AfterLastBn,
        PositionTag::AfterRelu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PositionTag::AfterConv1 => "after_conv1",
            PositionTag::AfterBn1 => "after_bn1",
            PositionTag::AfterLastBn => "after_last_bn",
            PositionTag::AfterRelu => "after_relu",
        }
    }

    /// Ablation-table label.
    pub fn label(self) -> &'static str {
        match self {
            PositionTag::AfterConv1 => "(a)",
            PositionTag::AfterBn1 => "(b)",
            PositionTag::AfterLastBn => "(c)",
            PositionTag::AfterRelu => "(d)",
        }
    }
}


impl fmt::Display for PositionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PositionTag::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown position {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input,
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    AvgPool2,
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    /// Elementwise sum of two inputs (residual connection).
    Add,
    /// Channel attention through `slots[slot]`.
    Attention { slot: usize },
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu => "relu",
            Op::AvgPool2 => "avgpool2",
            Op::GlobalAvgPool => "gap",
            Op::Flatten => "flatten",
            Op::Linear { .. } => "linear",
            Op::Add => "add",
            Op::Attention { .. } => "attention",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Input => 0,
            Op::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
}

/// Parameter names owned by a node.
pub fn weight_name(node: &str) -> String {
    format!("{node}.weight")
}
pub fn bias_name(node: &str) -> String {
    format!("{node}.bias")
}
pub fn gamma_name(node: &str) -> String {
    format!("{node}.gamma")
}
pub fn beta_name(node: &str) -> String {
    format!("{node}.beta")
}
pub fn running_mean_name(node: &str) -> String {
    format!("{node}.running_mean")
}
pub fn running_var_name(node: &str) -> String {
    format!("{node}.running_var")
}

/// An ordered layer DAG. Node 0 is the input; the last node is the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    /// Per-sample input shape, `[C, H, W]` or `[D]`.
    pub input_shape: Vec<usize>,
    /// Output width (number of classes for classifiers).
    pub classes: usize,
    pub nodes: Vec<Node>,
    pub slots: Vec<AttentionSlot>,
}

/// Incremental graph construction with shape checking at `finish`.
pub struct GraphBuilder {
    graph: ModelGraph,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>, classes: usize) -> Self {
        GraphBuilder {
            graph: ModelGraph {
                input_shape,
                classes,
                nodes: vec![Node {
                    name: "input".into(),
                    op: Op::Input,
                    inputs: vec![],
                }],
                slots: vec![],
            },
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn push(&mut self, name: impl Into<String>, op: Op, inputs: Vec<usize>) -> usize {
        self.graph.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
        });
        self.graph.nodes.len() - 1
    }

    pub fn attention(&mut self, slot: AttentionSlot, input: usize) -> usize {
        let name = slot.id.clone();
        self.graph.slots.push(slot);
        let idx = self.graph.slots.len() - 1;
        self.push(name, Op::Attention { slot: idx }, vec![input])
    }

    pub fn finish(self) -> Result<ModelGraph> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}

impl ModelGraph {
    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Per-node per-sample output shapes for a given per-sample input shape.
    pub fn infer_shapes_for(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let fail = |detail: String| Error::Graph(format!("node {} ({}): {detail}", node.name, node.op.kind_name()));
            if node.inputs.len() != node.op.arity() {
                return Err(fail(format!("expects {} inputs, has {}", node.op.arity(), node.inputs.len())));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&j| j >= i) {
                return Err(fail(format!("input {bad} does not precede it")));
            }
            if matches!(node.op, Op::Input) != (i == 0) {
                return Err(fail("the input node must be node 0 and unique".into()));
            }
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&j| &shapes[j]).collect();
            let shape = match &node.op {
                Op::Input => input_shape.to_vec(),
                Op::Conv2d { in_channels, out_channels, kernel, spec, .. } => match ins[0].as_slice() {
                    [c, h, w] if c == in_channels => {
                        let oh = spec.output_dim(*h, *kernel).map_err(|e| fail(e.to_string()))?;
                        let ow = spec.output_dim(*w, *kernel).map_err(|e| fail(e.to_string()))?;
                        vec![*out_channels, oh, ow]
                    }
                    s => return Err(fail(format!("input {s:?} incompatible with {in_channels} channels"))),
                },
                Op::BatchNorm { channels, .. } => {
                    if ins[0].first() != Some(channels) || !matches!(ins[0].len(), 1 | 3) {
                        return Err(fail(format!("input {:?} has no {channels}-channel axis", ins[0])));
                    }
                    ins[0].clone()
                }
                Op::Relu => ins[0].clone(),
                Op::AvgPool2 => match ins[0].as_slice() {
                    [c, h, w] if *h >= 2 && *w >= 2 => vec![*c, h / 2, w / 2],
                    s => return Err(fail(format!("cannot 2x2-pool {s:?}"))),
                },
                Op::GlobalAvgPool => match ins[0].as_slice() {
                    [c, _, _] => vec![*c],
                    s => return Err(fail(format!("cannot pool {s:?}"))),
                },
                Op::Flatten => vec![ins[0].iter().product()],
                Op::Linear { in_features, out_features, .. } => {
                    if ins[0].as_slice() != [*in_features] {
                        return Err(fail(format!("input {:?}, expected [{in_features}]", ins[0])));
                    }
                    vec![*out_features]
                }
                Op::Add => {
                    if ins[0] != ins[1] {
                        return Err(fail(format!("operands {:?} and {:?} differ", ins[0], ins[1])));
                    }
                    ins[0].clone()
                }
                Op::Attention { slot } => {
                    let s = self.slots.get(*slot).ok_or_else(|| fail(format!("unknown slot {slot}")))?;
                    s.validate().map_err(|e| fail(e.to_string()))?;
                    if ins[0].first() != Some(&s.channels) {
                        return Err(fail(format!("input {:?} vs slot channels {}", ins[0], s.channels)));
                    }
                    if !s.is_constant() && ins[0].len() != 3 {
                        return Err(fail("input-dependent attention needs a [C,H,W] feature map".into()));
                    }
                    ins[0].clone()
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.infer_shapes_for(&self.input_shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        let shapes = self.infer_shapes()?;
        let out = &shapes[self.output()];
        let expected: Vec<usize> = if self.nodes.len() == 1 {
            self.input_shape.clone()
        } else {
            vec![self.classes]
        };
        if *out != expected {
            return Err(Error::Graph(format!("output shape {out:?}, expected {expected:?}")));
        }
        let mut referenced = vec![0usize; self.slots.len()];
        for node in &self.nodes {
            if let Op::Attention { slot } = node.op {
                referenced[slot] += 1;
            }
        }
        if let Some(i) = referenced.iter().position(|&r| r != 1) {
            return Err(Error::Graph(format!("slot {} referenced {} times", self.slots[i].id, referenced[i])));
        }
        Ok(())
    }

    /// For each node, the indices of nodes that read its output.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                out[j].push(i);
            }
        }
        out
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn has_attention(&self) -> bool {
        !self.slots.is_empty()
    }

    /// Names, shapes and kinds of every tensor the graph expects in its parameter set.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let mut specs = Vec::new();
        for node in &self.nodes {
            let n = &node.name;
            match &node.op {
                Op::Conv2d { in_channels, out_channels, kernel, bias, .. } => {
                    specs.push((weight_name(n), vec![*out_channels, *in_channels, *kernel, *kernel], ParamKind::Trainable));
                    if *bias {
                        specs.push((bias_name(n), vec![*out_channels], ParamKind::Trainable));
                    }
                }
                Op::BatchNorm { channels, .. } => {
                    specs.push((gamma_name(n), vec![*channels], ParamKind::Trainable));
                    specs.push((beta_name(n), vec![*channels], ParamKind::Trainable));
                    specs.push((running_mean_name(n), vec![*channels], ParamKind::Buffer));
                    specs.push((running_var_name(n), vec![*channels], ParamKind::Buffer));
                }
                Op::Linear { in_features, out_features, bias } => {
                    specs.push((weight_name(n), vec![*out_features, *in_features], ParamKind::Trainable));
                    if *bias {
                        specs.push((bias_name(n), vec![*out_features], ParamKind::Trainable));
                    }
                }
                Op::Attention { slot } => {
                    let s = &self.slots[*slot];
                    if !matches!(s.mode, SlotMode::NoBody { .. }) {
                        for ((name, shape), full) in s.kind.param_shapes(s.channels).into_iter().zip(s.body_param_names()) {
                            debug_assert!(full.ends_with(name));
                            specs.push((full, shape, ParamKind::Trainable));
                        }
                    }
                    if let SlotMode::Asr { psi } | SlotMode::NoBody { psi } = s.mode {
                        let kind = if psi.is_learnable() { ParamKind::Trainable } else { ParamKind::Frozen };
                        specs.push((s.psi_name(), vec![s.psi_len()], kind));
                    }
                }
                _ => {}
            }
        }
        specs
    }

    /// Checks that `params` holds exactly the tensors this graph expects.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let specs = self.param_specs();
        for (name, shape, kind) in &specs {
            let e = params
                .entry(name)
                .ok_or_else(|| Error::Graph(format!("missing parameter {name}")))?;
            if e.value.shape() != shape.as_slice() {
                return Err(Error::Graph(format!("{name}: shape {:?}, expected {shape:?}", e.value.shape())));
            }
            if e.kind != *kind {
                return Err(Error::Graph(format!("{name}: kind {:?}, expected {kind:?}", e.kind)));
            }
        }
        if params.len() != specs.len() {
            let extra = params
                .names()
                .find(|n| !specs.iter().any(|(s, _, _)| s == *n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Graph(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Seeded initialization of every parameter and buffer.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for node in &self.nodes {
            let n = &node.name;
            match &node.op {
                Op::Conv2d { in_channels, out_channels, kernel, bias, .. } => {
                    let fan_in = (in_channels * kernel * kernel) as f64;
                    let shape = [*out_channels, *in_channels, *kernel, *kernel];
                    params.insert(weight_name(n), Tensor::normal(&shape, (2.0 / fan_in).sqrt(), &mut rng), ParamKind::Trainable);
                    if *bias {
                        params.insert(bias_name(n), Tensor::zeros(&[*out_channels]), ParamKind::Trainable);
                    }
                }
                Op::BatchNorm { channels, .. } => {
                    params.insert(gamma_name(n), Tensor::ones(&[*channels]), ParamKind::Trainable);
                    params.insert(beta_name(n), Tensor::zeros(&[*channels]), ParamKind::Trainable);
                    params.insert(running_mean_name(n), Tensor::zeros(&[*channels]), ParamKind::Buffer);
                    params.insert(running_var_name(n), Tensor::ones(&[*channels]), ParamKind::Buffer);
                }
                Op::Linear { in_features, out_features, bias } => {
                    let bound = 1.0 / (*in_features as f64).sqrt();
                    params.insert(
                        weight_name(n),
                        Tensor::uniform(&[*out_features, *in_features], -bound, bound, &mut rng),
                        ParamKind::Trainable,
                    );
                    if *bias {
                        params.insert(bias_name(n), Tensor::uniform(&[*out_features], -bound, bound, &mut rng), ParamKind::Trainable);
                    }
                }
                Op::Attention { slot } => self.slots[*slot].init_params(&mut params, &mut rng)?,
                _ => {}
            }
        }
        Ok(params)
    }
}

/// Exact number of model parameters (buffers excluded).
pub fn count_params(graph: &ModelGraph) -> usize {
    graph
        .param_specs()
        .iter()
        .filter(|(_, _, k)| *k != ParamKind::Buffer)
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}

/// Per-sample multiply-accumulate count of convolution and linear layers.
pub fn count_flops_conv(graph: &ModelGraph, input_shape: &[usize]) -> Result<u64> {
    let shapes = graph.infer_shapes_for(input_shape)?;
    let mut macs = 0u64;
    for (i, node) in graph.nodes.iter().enumerate() {
        match &node.op {
            Op::Conv2d { in_channels, kernel, .. } => {
                let out = &shapes[i];
                macs += (out.iter().product::<usize>() * in_channels * kernel * kernel) as u64;
            }
            Op::Linear { in_features, out_features, .. } => {
                macs += (in_features * out_features) as u64;
            }
            _ => {}
        }
    }
    Ok(macs)
}
