//! Folding constant attention vectors into the layers that produce their input.
//!
//! A constant vector `v` applied after a conv, batch-norm or linear layer is
//! the same as scaling that layer's output channels, so the layer's weights
//! can absorb it. Because `v > 0`, `relu(y) ⊙ v == relu(y ⊙ v)` and the fold
//! may also pass backwards through a ReLU.

use crate::attention::{self, SlotMode};
use crate::autodiff::{self, Mode};
use crate::error::{Error, Result};
use crate::graph::{self, ModelGraph, Node, Op};
use crate::ops;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Relative tolerance a fused model must meet before it is returned.
pub const FUSION_TOL: f64 = 1e-9;
/// Random inputs used by the built-in verification.
pub const VERIFY_SAMPLES: usize = 100;
pub const VERIFY_SEED: u64 = 0xf05e;
const VERIFY_CHUNK: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldKind {
    IntoConv,
    IntoBn,
    IntoFc,
    IntoAttentionValue,
}

impl FoldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FoldKind::IntoConv => "into_conv",
            FoldKind::IntoBn => "into_bn",
            FoldKind::IntoFc => "into_fc",
            FoldKind::IntoAttentionValue => "into_attention_value",
        }
    }
}

fn check_len(op: &str, expected: usize, v: &Tensor) -> Result<()> {
    if v.rank() != 1 || v.len() != expected {
        return Err(Error::dim(op, format!("vector of shape {:?}, expected [{expected}]", v.shape())));
    }
    Ok(())
}

/// Scales each output row of a `[M, ...]` tensor by `v[m]`.
fn scale_rows(t: &Tensor, v: &Tensor) -> Tensor {
    let row = t.len() / t.shape()[0];
    let data = t
        .data()
        .chunks(row)
        .zip(v.data())
        .flat_map(|(r, s)| r.iter().map(move |x| x * s))
        .collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

fn scale_vec(b: &Tensor, v: &Tensor) -> Tensor {
    Tensor::from_parts(b.shape().to_vec(), b.data().iter().zip(v.data()).map(|(a, s)| a * s).collect())
}

/// `K'_o = K_o·v_o`, `b'_o = b_o·v_o`.
pub fn fold_into_conv(k: &Tensor, b: Option<&Tensor>, v: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
    let (o, _, _, _) = k.dims4("fold_into_conv")?;
    check_len("fold_into_conv", o, v)?;
    if let Some(b) = b {
        check_len("fold_into_conv bias", o, b)?;
    }
    Ok((scale_rows(k, v), b.map(|b| scale_vec(b, v))))
}

/// `γ' = γ⊙v`, `β' = β⊙v`; running statistics are untouched.
pub fn fold_into_bn(gamma: &Tensor, beta: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    check_len("fold_into_bn", gamma.len(), v)?;
    check_len("fold_into_bn beta", gamma.len(), beta)?;
    Ok((scale_vec(gamma, v), scale_vec(beta, v)))
}

/// Row `i` of `W` and `bias[i]` scaled by `v[i]`.
pub fn fold_into_fc(w: &Tensor, b: Option<&Tensor>, v: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
    let (m, _) = w.dims2("fold_into_fc")?;
    check_len("fold_into_fc", m, v)?;
    if let Some(b) = b {
        check_len("fold_into_fc bias", m, b)?;
    }
    Ok((scale_rows(w, v), b.map(|b| scale_vec(b, v))))
}

/// Output rows of the value projection `W_V: [d_v, d]` scaled by `v`.
pub fn fold_into_attention_value(w_v: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (dv, _) = w_v.dims2("fold_into_attention_value")?;
    check_len("fold_into_attention_value", dv, v)?;
    Ok(scale_rows(w_v, v))
}

/// Softmax-free self-attention over tokens `x: [T, d]`: `(Q Kᵀ / √d_k) V`
/// with `Q = x W_Qᵀ`, `K = x W_Kᵀ`, `V = x W_Vᵀ`. Returns `[T, d_v]`.
pub fn linear_attention(x: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    let q = ops::linear(x, w_q, None)?;
    let k = ops::linear(x, w_k, None)?;
    let v = ops::linear(x, w_v, None)?;
    let (t, dk) = q.dims2("linear_attention")?;
    if k.shape() != q.shape() {
        return Err(Error::dim("linear_attention", "query and key widths differ"));
    }
    // scores = Q Kᵀ / √d_k, computed as linear(Q, K)
    let scores = ops::linear(&q, &k, None)?.scale(1.0 / (dk as f64).sqrt());
    let (_, dv) = v.dims2("linear_attention")?;
    let mut out = vec![0.0; t * dv];
    ops::gemm(t, t, dv, scores.data(), (t, 1), v.data(), (dv, 1), 0.0, &mut out, (dv, 1));
    Tensor::new(vec![t, dv], out)
}

/// One folded slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionRow {
    pub slot_id: String,
    pub fold_kind: FoldKind,
    pub target_layer: String,
    pub through_relu: bool,
    /// Euclidean norm of the product of every vector folded into the same target.
    pub composed_norm: f64,
    /// Max abs deviation of the folded target against the unfused target followed by the vectors.
    pub max_dev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionReport {
    pub rows: Vec<FusionRow>,
    /// Relative output deviation of the fused model over the verification inputs.
    pub global_dev: f64,
}

impl FusionReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["slot_id", "fold_kind", "target_layer", "through_relu", "max_dev", "composed_norm"])?;
        for r in &self.rows {
            w.write_record([
                r.slot_id.clone(),
                r.fold_kind.as_str().to_string(),
                r.target_layer.clone(),
                r.through_relu.to_string(),
                r.max_dev.to_string(),
                r.composed_norm.to_string(),
            ])?;
        }
        w.write_record(["model", "", "", "", &self.global_dev.to_string(), ""])?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// A fused model together with its report.
#[derive(Debug, Clone)]
pub struct Fused {
    pub graph: ModelGraph,
    pub params: ParamSet,
    pub report: FusionReport,
}

struct Target {
    node: usize,
    kind: FoldKind,
    vector: Vec<f64>,
    slots: Vec<(usize, bool)>,
}

/// Locates the layer a slot folds into, walking upstream through other
/// attention nodes and ReLUs. Every node on the path must have a single consumer.
fn find_target(graph: &ModelGraph, consumers: &[Vec<usize>], node: usize) -> std::result::Result<(usize, FoldKind, bool), String> {
    let mut through_relu = false;
    let mut cur = graph.nodes[node].inputs[0];
    loop {
        if consumers[cur].len() != 1 {
            return Err(format!(
                "upstream node {} feeds {} consumers",
                graph.nodes[cur].name,
                consumers[cur].len()
            ));
        }
        let n = &graph.nodes[cur];
        match n.op {
            Op::Conv2d { .. } => return Ok((cur, FoldKind::IntoConv, through_relu)),
            Op::BatchNorm { .. } => return Ok((cur, FoldKind::IntoBn, through_relu)),
            Op::Linear { .. } => return Ok((cur, FoldKind::IntoFc, through_relu)),
            Op::Relu => through_relu = true,
            Op::Attention { .. } => {}
            _ => return Err(format!("no foldable layer upstream (reached {} {})", n.op.kind_name(), n.name)),
        }
        cur = n.inputs[0];
    }
}

fn fold_target(graph: &ModelGraph, params: &mut ParamSet, t: &Target) -> Result<()> {
    let name = &graph.nodes[t.node].name;
    let v = Tensor::new(vec![t.vector.len()], t.vector.clone())?;
    match t.kind {
        FoldKind::IntoConv | FoldKind::IntoFc => {
            let w = params.get(&graph::weight_name(name))?.clone();
            let b = params.get(&graph::bias_name(name)).ok().cloned();
            let (w2, b2) = if t.kind == FoldKind::IntoConv {
                fold_into_conv(&w, b.as_ref(), &v)?
            } else {
                fold_into_fc(&w, b.as_ref(), &v)?
            };
            params.set(&graph::weight_name(name), w2)?;
            if let Some(b2) = b2 {
                params.set(&graph::bias_name(name), b2)?;
            }
        }
        FoldKind::IntoBn => {
            let (g, b) = fold_into_bn(
                params.get(&graph::gamma_name(name))?,
                params.get(&graph::beta_name(name))?,
                &v,
            )?;
            params.set(&graph::gamma_name(name), g)?;
            params.set(&graph::beta_name(name), b)?;
        }
        FoldKind::IntoAttentionValue => unreachable!("graphs contain no attention-value projections"),
    }
    Ok(())
}

/// Evaluates a single layer in inference mode.
fn eval_layer(graph: &ModelGraph, params: &ParamSet, node: usize, x: &Tensor) -> Result<Tensor> {
    let n = &graph.nodes[node];
    match &n.op {
        Op::Conv2d { spec, .. } => ops::conv2d(
            x,
            params.get(&graph::weight_name(&n.name))?,
            params.get(&graph::bias_name(&n.name)).ok(),
            *spec,
        ),
        Op::Linear { .. } => ops::linear(
            x,
            params.get(&graph::weight_name(&n.name))?,
            params.get(&graph::bias_name(&n.name)).ok(),
        ),
        Op::BatchNorm { eps, .. } => ops::batchnorm_infer(
            x,
            &ops::BatchNormParams {
                mean: params.get(&graph::running_mean_name(&n.name))?,
                var: params.get(&graph::running_var_name(&n.name))?,
                gamma: params.get(&graph::gamma_name(&n.name))?,
                beta: params.get(&graph::beta_name(&n.name))?,
                eps: *eps,
            },
        ),
        op => Err(Error::State(format!("{} is not a fold target", op.kind_name()))),
    }
}

/// Removes every constant attention slot by folding its vector into the
/// upstream conv, batch-norm or linear layer. The result is verified against
/// the input model on [`VERIFY_SAMPLES`] random inputs and rejected if the
/// relative deviation exceeds [`FUSION_TOL`].
pub fn fuse_model(graph: &ModelGraph, params: &ParamSet) -> Result<Fused> {
    graph.check_params(params)?;
    let consumers = graph.consumers();
    let mut targets: BTreeMap<usize, Target> = BTreeMap::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        let Op::Attention { slot } = node.op else { continue };
        let s = &graph.slots[slot];
        if s.mode == SlotMode::Standard {
            return Err(Error::Fusion {
                slot: s.id.clone(),
                reason: "input-dependent attention cannot be folded".into(),
            });
        }
        let v = attention::asr_vector(s, params)?;
        let (target, kind, through_relu) = find_target(graph, &consumers, i).map_err(|reason| Error::Fusion {
            slot: s.id.clone(),
            reason,
        })?;
        let entry = targets.entry(target).or_insert_with(|| Target {
            node: target,
            kind,
            vector: vec![1.0; v.len()],
            slots: Vec::new(),
        });
        if entry.vector.len() != v.len() {
            return Err(Error::Fusion {
                slot: s.id.clone(),
                reason: format!("vector length {} does not match target width {}", v.len(), entry.vector.len()),
            });
        }
        entry.vector.iter_mut().zip(v.data()).for_each(|(a, b)| *a *= b);
        entry.slots.push((slot, through_relu));
    }

    let mut fused_params = params.clone();
    for s in &graph.slots {
        for name in s.param_names() {
            fused_params.remove(&name);
        }
    }
    let shapes = graph.infer_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED);
    let mut rows = Vec::new();
    for t in targets.values() {
        fold_target(graph, &mut fused_params, t)?;
        let in_shape: Vec<usize> = std::iter::once(4)
            .chain(shapes[graph.nodes[t.node].inputs[0]].iter().copied())
            .collect();
        let x = Tensor::uniform(&in_shape, -1.0, 1.0, &mut rng);
        let reference = ops::channel_mul(
            &eval_layer(graph, params, t.node, &x)?,
            &Tensor::new(vec![t.vector.len()], t.vector.clone())?,
        )?;
        let max_dev = eval_layer(graph, &fused_params, t.node, &x)?.max_abs_diff(&reference)?;
        let composed_norm = t.vector.iter().map(|a| a * a).sum::<f64>().sqrt();
        for &(slot, through_relu) in &t.slots {
            rows.push(FusionRow {
                slot_id: graph.slots[slot].id.clone(),
                fold_kind: t.kind,
                target_layer: graph.nodes[t.node].name.clone(),
                through_relu,
                composed_norm,
                max_dev,
            });
        }
    }
    rows.sort_by_key(|r| graph.slots.iter().position(|s| s.id == r.slot_id));

    let fused_graph = strip_attention(graph)?;
    fused_graph.check_params(&fused_params)?;
    let eq = verify_equivalence((graph, params), (&fused_graph, &fused_params), VERIFY_SAMPLES, VERIFY_SEED, FUSION_TOL)?;
    if !eq.passed {
        return Err(Error::Verification {
            deviation: eq.max_dev,
            tol: FUSION_TOL,
        });
    }
    Ok(Fused {
        graph: fused_graph,
        params: fused_params,
        report: FusionReport {
            rows,
            global_dev: eq.max_dev,
        },
    })
}

/// The graph with every attention node removed and its consumers rewired to the node's input.
fn strip_attention(graph: &ModelGraph) -> Result<ModelGraph> {
    let mut remap = vec![usize::MAX; graph.nodes.len()];
    let mut nodes: Vec<Node> = Vec::with_capacity(graph.nodes.len());
    for (i, node) in graph.nodes.iter().enumerate() {
        if let Op::Attention { .. } = node.op {
            remap[i] = remap[node.inputs[0]];
            continue;
        }
        let mut n = node.clone();
        n.inputs = node.inputs.iter().map(|&j| remap[j]).collect();
        remap[i] = nodes.len();
        nodes.push(n);
    }
    let g = ModelGraph {
        input_shape: graph.input_shape.clone(),
        classes: graph.classes,
        nodes,
        slots: Vec::new(),
    };
    g.validate()?;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    pub max_dev: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Max over `n` seeded inputs, uniform in `[-1, 1]`, of `|a−b|∞ / (1+|a|∞)`
/// on the models' inference-mode outputs.
pub fn verify_equivalence(
    a: (&ModelGraph, &ParamSet),
    b: (&ModelGraph, &ParamSet),
    n: usize,
    seed: u64,
    tol: f64,
) -> Result<Equivalence> {
    if a.0.input_shape != b.0.input_shape || a.0.classes != b.0.classes {
        return Err(Error::dim(
            "verify_equivalence",
            format!(
                "signatures differ: {:?}->{} vs {:?}->{}",
                a.0.input_shape, a.0.classes, b.0.input_shape, b.0.classes
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_dev: f64 = 0.0;
    let mut done = 0;
    while done < n {
        let batch = VERIFY_CHUNK.min(n - done);
        let shape: Vec<usize> = std::iter::once(batch).chain(a.0.input_shape.iter().copied()).collect();
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let ya = autodiff::forward(a.0, a.1, &x, Mode::Eval)?.0;
        let yb = autodiff::forward(b.0, b.1, &x, Mode::Eval)?.0;
        for s in 0..batch {
            let (ra, rb) = (ya.sample(s), yb.sample(s));
            let diff = ra.iter().zip(rb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            let scale = 1.0 + ra.iter().map(|p| p.abs()).fold(0.0, f64::max);
            max_dev = max_dev.max(diff / scale);
        }
        done += batch;
    }
    Ok(Equivalence {
        max_dev,
        tol,
        passed: max_dev <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_vector_is_a_no_op() {
        let k = t(&[2, 1, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[2], &[0.5, -0.5]);
        let one = Tensor::ones(&[2]);
        let (k2, b2) = fold_into_conv(&k, Some(&b), &one).unwrap();
        assert_eq!((k2, b2.unwrap()), (k.clone(), b.clone()));
        assert_eq!(fold_into_bn(&b, &b, &one).unwrap(), (b.clone(), b.clone()));
        let w = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(fold_into_fc(&w, None, &one).unwrap().0, w);
        assert_eq!(fold_into_attention_value(&w, &one).unwrap(), w);
    }

    #[test]
    fn scalar_examples() {
        let (k, b) = fold_into_conv(&t(&[1, 1, 1, 1], &[2.]), Some(&t(&[1], &[1.])), &t(&[1], &[0.5])).unwrap();
        assert_eq!(k.data(), &[1.0]);
        assert_eq!(b.unwrap().data(), &[0.5]);
        let (_, beta) = fold_into_bn(&t(&[2], &[1., 2.]), &Tensor::zeros(&[2]), &t(&[2], &[0.3, 0.7])).unwrap();
        assert_eq!(beta.data(), &[0.0, 0.0]);
        let (w, _) = fold_into_fc(&t(&[2, 2], &[1., 0., 0., 1.]), None, &t(&[2], &[2., 3.])).unwrap();
        assert_eq!(w.data(), &[2., 0., 0., 3.]);
        assert_eq!(fold_into_attention_value(&t(&[1, 1], &[2.]), &t(&[1], &[3.])).unwrap().data(), &[6.0]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let v = Tensor::ones(&[3]);
        assert!(fold_into_conv(&Tensor::ones(&[2, 1, 1, 1]), None, &v).is_err());
        assert!(fold_into_bn(&Tensor::ones(&[2]), &Tensor::ones(&[2]), &v).is_err());
        assert!(fold_into_fc(&Tensor::ones(&[2, 2]), None, &v).is_err());
        assert!(fold_into_attention_value(&Tensor::ones(&[2, 2]), &v).is_err());
    }

    #[test]
    fn linear_attention_single_token() {
        // one token, d = 1: (q k / 1) v
        let x = t(&[1, 1], &[2.0]);
        let y = linear_attention(&x, &t(&[1, 1], &[1.5]), &t(&[1, 1], &[0.5]), &t(&[1, 1], &[3.0])).unwrap();
        assert!((y.data()[0] - 3.0 * 1.0 * 6.0).abs() < 1e-15);
    }

    #[test]
    fn every_kind_and_position_fuses_to_the_baseline() {
        use crate::attention::{AttentionKind, PsiMode};
        use crate::backbones::{build_toy_resnet, build_toy_vgg, AttentionConfig};
        use crate::graph::{count_params, PositionTag};
        let base_r = build_toy_resnet(1, 8, 4, &[3, 8, 8], None).unwrap();
        let base_v = build_toy_vgg(2, 4, 4, &[3, 8, 8], None).unwrap();
        for kind in AttentionKind::all_defaults() {
            for pos in PositionTag::ALL {
                let cfg = AttentionConfig::new(kind.clone(), SlotMode::Asr { psi: PsiMode::default() })
                    .at(pos)
                    .stacked(2);
                for (g, base) in [
                    (build_toy_resnet(1, 8, 4, &[3, 8, 8], Some(&cfg)).unwrap(), &base_r),
                    (build_toy_vgg(2, 4, 4, &[3, 8, 8], Some(&cfg)).unwrap(), &base_v),
                ] {
                    let p = g.init_params(9).unwrap();
                    let fused = fuse_model(&g, &p).unwrap();
                    assert_eq!(&fused.graph, base, "{} {pos}", kind.name());
                    assert_eq!(count_params(&fused.graph), count_params(base));
                    assert!(fused.report.global_dev <= FUSION_TOL);
                    assert!(fused.report.rows.iter().all(|r| r.through_relu == (pos == PositionTag::AfterRelu)));
                }
            }
        }
    }

    #[test]
    fn standard_slot_is_not_foldable() {
        use crate::attention::AttentionKind;
        use crate::backbones::{build_toy_resnet, AttentionConfig};
        let cfg = AttentionConfig::new(AttentionKind::Ie, SlotMode::Standard);
        let g = build_toy_resnet(1, 4, 2, &[3, 4, 4], Some(&cfg)).unwrap();
        let p = g.init_params(0).unwrap();
        match fuse_model(&g, &p) {
            Err(Error::Fusion { slot, .. }) => assert_eq!(slot, "block0.attn0"),
            other => panic!("expected a fusion error, got {other:?}"),
        }
    }
}
