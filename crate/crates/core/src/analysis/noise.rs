//! Batch-norm noise attacks: `[(x−μ)/σ ⊙ N_a + N_b] γ + β` at every BN layer.

use crate::autodiff::{self, BnNoise, ForwardHooks, Mode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Op};
use crate::ops::BnPerturbation;
use crate::params::ParamSet;
use crate::train::{evaluate_with, Accuracy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const DEFAULT_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    Constant { na: f64, nb: f64 },
    /// `N_a ~ N(1, σ_a²)`, `N_b ~ N(0, σ_b²)`, drawn per layer per forward pass.
    Random { sigma_a: f64, sigma_b: f64, seed: u64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::Random { sigma_a, sigma_b, .. } if !(sigma_a >= 0.0 && sigma_b >= 0.0) => {
                Err(Error::Config(format!("noise deviations ({sigma_a}, {sigma_b}) must be non-negative")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            NoiseSpec::Constant { na, nb } => format!("({na},{nb})"),
            NoiseSpec::Random { sigma_a, sigma_b, .. } => format!("N({sigma_a},{sigma_b})"),
        }
    }

    fn with_seed(self, seed: u64) -> Self {
        match self {
            NoiseSpec::Random { sigma_a, sigma_b, .. } => NoiseSpec::Random { sigma_a, sigma_b, seed },
            c => c,
        }
    }
}

struct Sampler {
    spec: NoiseSpec,
    rng: ChaCha8Rng,
}

impl BnNoise for Sampler {
    fn sample(&mut self, _layer: &str) -> BnPerturbation {
        match self.spec {
            NoiseSpec::Constant { na, nb } => BnPerturbation { scale: na, shift: nb },
            NoiseSpec::Random { sigma_a, sigma_b, .. } => BnPerturbation {
                scale: Normal::new(1.0, sigma_a).expect("validated").sample(&mut self.rng),
                shift: Normal::new(0.0, sigma_b).expect("validated").sample(&mut self.rng),
            },
        }
    }
}

/// Accuracy with every batch-norm layer perturbed according to `spec`.
pub fn noise_attack_eval(
    graph: &ModelGraph,
    params: &ParamSet,
    dataset: &Dataset,
    spec: NoiseSpec,
    k: usize,
) -> Result<Accuracy> {
    spec.validate()?;
    if !graph.nodes.iter().any(|n| matches!(n.op, Op::BatchNorm { .. })) {
        return Err(Error::Graph("noise attacks need at least one batch-norm layer".into()));
    }
    let seed = match spec {
        NoiseSpec::Random { seed, .. } => seed,
        NoiseSpec::Constant { .. } => 0,
    };
    let mut sampler = Sampler {
        spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    evaluate_with(dataset, k, |x| {
        let hooks = ForwardHooks {
            bn_noise: Some(&mut sampler),
            frozen_attention: None,
        };
        Ok(autodiff::forward_with(graph, params, x, Mode::Eval, hooks)?.0)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSummary {
    pub spec: NoiseSpec,
    pub top1: Vec<f64>,
}

impl NoiseSummary {
    pub fn mean(&self) -> f64 {
        self.top1.iter().sum::<f64>() / self.top1.len() as f64
    }

    /// Population standard deviation over repeats.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.top1.iter().map(|a| (a - m).powi(2)).sum::<f64>() / self.top1.len() as f64).sqrt()
    }
}

/// Top-1 accuracy over `repeats` attacks; repeat `r` of a random spec uses seed `seed + r`.
pub fn noise_attack_repeated(
    graph: &ModelGraph,
    params: &ParamSet,
    dataset: &Dataset,
    spec: NoiseSpec,
    repeats: usize,
) -> Result<NoiseSummary> {
    if repeats == 0 {
        return Err(Error::Config("noise attacks need at least one repeat".into()));
    }
    let base = match spec {
        NoiseSpec::Random { seed, .. } => seed,
        NoiseSpec::Constant { .. } => 0,
    };
    let top1 = (0..repeats as u64)
        .map(|r| noise_attack_eval(graph, params, dataset, spec.with_seed(base + r), 1).map(|a| a.top1))
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseSummary { spec, top1 })
}

/// One row per `(noise, model)`: mean and standard deviation of top-1 accuracy.
pub fn noise_table_csv(rows: &[(String, NoiseSummary)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["noise", "model", "top1_mean", "top1_std", "repeats"])?;
    for (model, s) in rows {
        w.write_record([
            s.spec.label(),
            model.clone(),
            s.mean().to_string(),
            s.std().to_string(),
            s.top1.len().to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
