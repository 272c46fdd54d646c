//! Replacing input-dependent attention with its mean vector over a calibration set.

use crate::autodiff::{self, ForwardHooks, Mode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Op};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{evaluate, evaluate_with, Accuracy};
use std::collections::BTreeMap;

const CALIB_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FreezeResult {
    pub live: Accuracy,
    pub frozen: Accuracy,
    /// Mean attention vector per slot index.
    pub vectors: BTreeMap<usize, Tensor>,
}

/// Mean attention vector of every attention node over `calib`.
pub fn mean_attention_vectors(graph: &ModelGraph, params: &ParamSet, calib: &Dataset) -> Result<BTreeMap<usize, Tensor>> {
    if calib.is_empty() {
        return Err(Error::EmptyDataset("calibration set".into()));
    }
    let mut sums: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    let idx: Vec<usize> = (0..calib.len()).collect();
    for chunk in idx.chunks(CALIB_BATCH) {
        let (x, _) = calib.batch(chunk)?;
        let (_, tape) = autodiff::forward(graph, params, &x, Mode::Eval)?;
        for (i, node) in graph.nodes.iter().enumerate() {
            let Op::Attention { slot } = node.op else { continue };
            let v = tape.attention_vectors(i).expect("attention node records vectors");
            let (n, c) = v.dims2("freeze")?;
            let acc = sums.entry(slot).or_insert_with(|| (i, vec![0.0; c]));
            for s in 0..n {
                acc.1.iter_mut().zip(v.sample(s)).for_each(|(a, b)| *a += b);
            }
        }
    }
    let n = calib.len() as f64;
    sums.into_iter()
        .map(|(slot, (_, sum))| Ok((slot, Tensor::new(vec![sum.len()], sum.into_iter().map(|s| s / n).collect())?)))
        .collect()
}

/// Accuracy of the live model and of the model whose attention modules are
/// replaced by their calibration-set mean vectors.
pub fn freeze_attention_eval(
    graph: &ModelGraph,
    params: &ParamSet,
    calib: &Dataset,
    eval: &Dataset,
    k: usize,
) -> Result<FreezeResult> {
    let vectors = mean_attention_vectors(graph, params, calib)?;
    let live = evaluate(graph, params, eval, k)?;
    let frozen = evaluate_with(eval, k, |x| {
        let hooks = ForwardHooks {
            bn_noise: None,
            frozen_attention: Some(&vectors),
        };
        Ok(autodiff::forward_with(graph, params, x, Mode::Eval, hooks)?.0)
    })?;
    Ok(FreezeResult { live, frozen, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attn_standard, AttentionKind, PsiMode, SlotMode};
    use crate::backbones::{build_toy_vgg, AttentionConfig};
    use crate::data::synth_dataset;

    #[test]
    fn single_sample_calibration_gives_its_vector() {
        let cfg = AttentionConfig::new(AttentionKind::Se { reduction: 2 }, SlotMode::Standard);
        let g = build_toy_vgg(1, 4, 3, &[3, 4, 4], Some(&cfg)).unwrap();
        let p = g.init_params(3).unwrap();
        let calib = synth_dataset(3, 1, 4, 5, 0.1).unwrap();
        let means = mean_attention_vectors(&g, &p, &calib).unwrap();
        let (x, _) = calib.batch(&[0]).unwrap();
        let (_, tape) = autodiff::forward(&g, &p, &x, Mode::Eval).unwrap();
        let attn = g.node_index("stage0.attn0").unwrap();
        let slot = &g.slots[0];
        let (_, v) = attn_standard(&slot.kind, &slot.body_params(&p).unwrap(), tape.value(attn - 1)).unwrap();
        assert_eq!(means[&0].data(), v.data());
    }

    #[test]
    fn constant_attention_is_unchanged() {
        let cfg = AttentionConfig::new(AttentionKind::Ie, SlotMode::Asr { psi: PsiMode::default() });
        let g = build_toy_vgg(1, 4, 3, &[3, 4, 4], Some(&cfg)).unwrap();
        let p = g.init_params(3).unwrap();
        let ds = synth_dataset(3, 12, 4, 5, 0.1).unwrap();
        let r = freeze_attention_eval(&g, &p, &ds, &ds, 1).unwrap();
        assert_eq!(r.live, r.frozen);
        assert!(freeze_attention_eval(&g, &p, &ds.take(0), &ds, 1).is_err());
    }
}
