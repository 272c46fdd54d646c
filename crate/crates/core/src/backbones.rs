//! Toy backbones with attention attachment points.
//!
//! Node names never depend on the attention configuration, so a fused model
//! has exactly the same graph as the attention-free build.

use crate::attention::{AttentionKind, AttentionSlot, SlotMode};
use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, ModelGraph, Op, PositionTag, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use crate::tensor::ConvSpec;
use serde::{Deserialize, Serialize};

/// How attention is attached to every block of a backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub mode: SlotMode,
    pub position: PositionTag,
    /// Number of stacked modules at the position.
    pub delta: usize,
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind, mode: SlotMode) -> Self {
        AttentionConfig {
            kind,
            mode,
            position: PositionTag::default(),
            delta: 1,
        }
    }

    pub fn at(mut self, position: PositionTag) -> Self {
        self.position = position;
        self
    }

    pub fn stacked(mut self, delta: usize) -> Self {
        self.delta = delta;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::Config("attention multiplicity must be at least 1".into()));
        }
        Ok(())
    }
}

fn conv3(in_channels: usize, out_channels: usize) -> Op {
    Op::Conv2d {
        in_channels,
        out_channels,
        kernel: 3,
        spec: ConvSpec { stride: 1, padding: 1 },
        bias: false,
    }
}

fn bn(channels: usize) -> Op {
    Op::BatchNorm {
        channels,
        eps: DEFAULT_BN_EPS,
        momentum: DEFAULT_BN_MOMENTUM,
    }
}

/// Inserts the configured stack of slots after `node` if the position matches.
fn attach(
    b: &mut GraphBuilder,
    asr: Option<&AttentionConfig>,
    here: PositionTag,
    prefix: &str,
    channels: usize,
    mut node: usize,
) -> usize {
    if let Some(cfg) = asr.filter(|c| c.position == here) {
        for j in 0..cfg.delta {
            let slot = AttentionSlot {
                id: format!("{prefix}.attn{j}"),
                kind: cfg.kind.clone(),
                channels,
                mode: cfg.mode,
                position: here,
                delta_index: j,
            };
            node = b.attention(slot, node);
        }
    }
    node
}

fn check_dims(width: usize, classes: usize, input: &[usize]) -> Result<()> {
    if width == 0 || classes == 0 {
        return Err(Error::Config("width and classes must be positive".into()));
    }
    if input.len() != 3 || input.contains(&0) {
        return Err(Error::Config(format!("input shape {input:?} is not [C, H, W]")));
    }
    Ok(())
}

/// Stem conv-bn-relu, then `depth_blocks` basic blocks
/// `conv1 (a) bn1 (b) relu (d) conv2 bn2 (c) add relu`, then GAP and a linear head.
pub fn build_toy_resnet(
    depth_blocks: usize,
    width: usize,
    classes: usize,
    input: &[usize],
    asr: Option<&AttentionConfig>,
) -> Result<ModelGraph> {
    check_dims(width, classes, input)?;
    if depth_blocks == 0 {
        return Err(Error::Config("a residual network needs at least one block".into()));
    }
    if let Some(c) = asr {
        c.validate()?;
    }
    let mut b = GraphBuilder::new(input.to_vec(), classes);
    let mut x = b.push("stem.conv", conv3(input[0], width), vec![0]);
    x = b.push("stem.bn", bn(width), vec![x]);
    x = b.push("stem.relu", Op::Relu, vec![x]);
    for i in 0..depth_blocks {
        let p = format!("block{i}");
        let skip = x;
        let mut y = b.push(format!("{p}.conv1"), conv3(width, width), vec![x]);
        y = attach(&mut b, asr, PositionTag::AfterConv1, &p, width, y);
        y = b.push(format!("{p}.bn1"), bn(width), vec![y]);
        y = attach(&mut b, asr, PositionTag::AfterBn1, &p, width, y);
        y = b.push(format!("{p}.relu1"), Op::Relu, vec![y]);
        y = attach(&mut b, asr, PositionTag::AfterRelu, &p, width, y);
        y = b.push(format!("{p}.conv2"), conv3(width, width), vec![y]);
        y = b.push(format!("{p}.bn2"), bn(width), vec![y]);
        y = attach(&mut b, asr, PositionTag::AfterLastBn, &p, width, y);
        y = b.push(format!("{p}.add"), Op::Add, vec![y, skip]);
        x = b.push(format!("{p}.relu2"), Op::Relu, vec![y]);
    }
    x = b.push("gap", Op::GlobalAvgPool, vec![x]);
    b.push(
        "fc",
        Op::Linear {
            in_features: width,
            out_features: classes,
            bias: true,
        },
        vec![x],
    );
    b.finish()
}

/// `stages` of `conv (a) bn (b|c) relu (d) avgpool`, doubling the width each
/// stage, then GAP and a linear head. Both pre-activation tags sit between
/// batch-norm and ReLU since a stage has a single batch-norm.
pub fn build_toy_vgg(
    stages: usize,
    width: usize,
    classes: usize,
    input: &[usize],
    asr: Option<&AttentionConfig>,
) -> Result<ModelGraph> {
    check_dims(width, classes, input)?;
    if stages == 0 {
        return Err(Error::Config("a VGG-style network needs at least one stage".into()));
    }
    if let Some(c) = asr {
        c.validate()?;
    }
    let mut b = GraphBuilder::new(input.to_vec(), classes);
    let mut x = 0;
    let mut in_ch = input[0];
    for s in 0..stages {
        let p = format!("stage{s}");
        let out = width << s;
        x = b.push(format!("{p}.conv"), conv3(in_ch, out), vec![x]);
        x = attach(&mut b, asr, PositionTag::AfterConv1, &p, out, x);
        x = b.push(format!("{p}.bn"), bn(out), vec![x]);
        x = attach(&mut b, asr, PositionTag::AfterBn1, &p, out, x);
        x = attach(&mut b, asr, PositionTag::AfterLastBn, &p, out, x);
        x = b.push(format!("{p}.relu"), Op::Relu, vec![x]);
        x = attach(&mut b, asr, PositionTag::AfterRelu, &p, out, x);
        x = b.push(format!("{p}.pool"), Op::AvgPool2, vec![x]);
        in_ch = out;
    }
    x = b.push("gap", Op::GlobalAvgPool, vec![x]);
    b.push(
        "fc",
        Op::Linear {
            in_features: in_ch,
            out_features: classes,
            bias: true,
        },
        vec![x],
    );
    b.finish()
}

/// A residual chain `x_{t+1} = x_t + relu(W_t x_t) ⊙ v_t` on `[width]` vectors,
/// with square bias-free `W_t`. Slots must be constant (ASR or body-free) and
/// always sit after the ReLU; `None` gives the attention-free chain.
pub fn build_residual_chain(depth: usize, width: usize, asr: Option<&AttentionConfig>) -> Result<ModelGraph> {
    if depth == 0 || width == 0 {
        return Err(Error::Config("a residual chain needs positive depth and width".into()));
    }
    let asr = match asr {
        Some(c) if c.mode == SlotMode::Standard => {
            return Err(Error::Config("residual chains take constant attention only".into()));
        }
        Some(c) => {
            c.validate()?;
            Some(c.clone().at(PositionTag::AfterRelu))
        }
        None => None,
    };
    let mut b = GraphBuilder::new(vec![width], width);
    let mut x = 0;
    for t in 0..depth {
        let p = format!("block{t}");
        let mut y = b.push(
            format!("{p}.fc"),
            Op::Linear {
                in_features: width,
                out_features: width,
                bias: false,
            },
            vec![x],
        );
        y = b.push(format!("{p}.relu"), Op::Relu, vec![y]);
        y = attach(&mut b, asr.as_ref(), PositionTag::AfterRelu, &p, width, y);
        x = b.push(format!("{p}.add"), Op::Add, vec![x, y]);
    }
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PsiMode;
    use crate::autodiff::{forward, Mode};
    use crate::graph::count_params;
    use crate::tensor::Tensor;

    fn asr(kind: AttentionKind) -> AttentionConfig {
        AttentionConfig::new(kind, SlotMode::Asr { psi: PsiMode::default() })
    }

    #[test]
    fn resnet_baseline_param_count_is_closed_form() {
        let (w, k, blocks) = (8, 10, 2);
        let g = build_toy_resnet(blocks, w, k, &[3, 8, 8], None).unwrap();
        let stem = 3 * w * 9 + 2 * w;
        let block = 2 * w * w * 9 + 4 * w;
        assert_eq!(count_params(&g), stem + blocks * block + w * k + k);
    }

    #[test]
    fn vgg_baseline_param_count_is_closed_form() {
        let g = build_toy_vgg(2, 4, 5, &[3, 8, 8], None).unwrap();
        let s0 = 3 * 4 * 9 + 2 * 4;
        let s1 = 4 * 8 * 9 + 2 * 8;
        assert_eq!(count_params(&g), s0 + s1 + 8 * 5 + 5);
    }

    #[test]
    fn node_names_match_baseline_apart_from_slots() {
        let base = build_toy_resnet(2, 4, 3, &[3, 4, 4], None).unwrap();
        for pos in PositionTag::ALL {
            let cfg = asr(AttentionKind::Ie).at(pos).stacked(2);
            let g = build_toy_resnet(2, 4, 3, &[3, 4, 4], Some(&cfg)).unwrap();
            let names: Vec<_> = g
                .nodes
                .iter()
                .filter(|n| !matches!(n.op, Op::Attention { .. }))
                .map(|n| &n.name)
                .collect();
            let want: Vec<_> = base.nodes.iter().map(|n| &n.name).collect();
            assert_eq!(names, want);
            assert_eq!(g.slots.len(), 4);
        }
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        let cfg = asr(AttentionKind::Se { reduction: 4 });
        for g in [
            build_toy_resnet(1, 8, 10, &[3, 8, 8], Some(&cfg)).unwrap(),
            build_toy_vgg(2, 8, 10, &[3, 8, 8], Some(&cfg)).unwrap(),
        ] {
            let p = g.init_params(0).unwrap();
            let (y, _) = forward(&g, &p, &Tensor::zeros(&[2, 3, 8, 8]), Mode::Eval).unwrap();
            assert_eq!(y.shape(), &[2, 10]);
            assert!(y.first_non_finite().is_none());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(build_toy_resnet(0, 8, 10, &[3, 8, 8], None).is_err());
        assert!(build_toy_vgg(1, 0, 10, &[3, 8, 8], None).is_err());
        assert!(build_toy_resnet(1, 8, 10, &[3, 8, 8], Some(&asr(AttentionKind::Ie).stacked(0))).is_err());
        let standard = AttentionConfig::new(AttentionKind::Ie, SlotMode::Standard);
        assert!(build_residual_chain(2, 4, Some(&standard)).is_err());
        assert!(build_toy_vgg(4, 4, 10, &[3, 8, 8], None).is_err());
    }

    #[test]
    fn chain_is_square() {
        let g = build_residual_chain(3, 5, Some(&asr(AttentionKind::Ie))).unwrap();
        assert_eq!(g.classes, 5);
        assert_eq!(g.slots.len(), 3);
    }
}
