//! The training loop and top-k evaluation.

use crate::autodiff::{self, Mode};
use crate::backbones::{self, AttentionConfig};
use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::optim::{lr_at, Schedule, Sgd};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Arch {
    Resnet { blocks: usize, width: usize },
    Vgg { stages: usize, width: usize },
}

impl Arch {
    pub fn build(&self, input: &[usize], classes: usize, attention: Option<&AttentionConfig>) -> Result<ModelGraph> {
        match *self {
            Arch::Resnet { blocks, width } => backbones::build_toy_resnet(blocks, width, classes, input, attention),
            Arch::Vgg { stages, width } => backbones::build_toy_vgg(stages, width, classes, input, attention),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    pub attention: Option<AttentionConfig>,
    pub data: DatasetSpec,
    /// Held-out set for the per-epoch accuracy columns; the training set when absent.
    pub eval_data: Option<DatasetSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub top_k: usize,
    pub augment_flip: bool,
    pub augment_crop: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if self.batch_size == 0 || self.top_k == 0 {
            return Err(Error::Config("batch size and top-k must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
    pub topk: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "lr", "loss", "top1", "top5"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.top1.to_string(),
            r.topk.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Called with epoch 0 before the first update and after every epoch.
pub trait TrainObserver {
    fn on_epoch_end(&mut self, epoch: usize, graph: &ModelGraph, params: &ParamSet) -> Result<()>;
}

impl TrainObserver for () {
    fn on_epoch_end(&mut self, _: usize, _: &ModelGraph, _: &ParamSet) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub graph: ModelGraph,
    pub params: ParamSet,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub topk: f64,
}

/// Fraction of samples whose label is the arg-max, and among the `k` largest logits.
/// Ties are broken towards the lower class index.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize], k: usize) -> Result<(usize, usize)> {
    let (n, classes) = logits.dims2("accuracy")?;
    if labels.len() != n {
        return Err(Error::dim("accuracy", format!("{} labels for {n} rows", labels.len())));
    }
    let (mut c1, mut ck) = (0, 0);
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let above = row
            .iter()
            .enumerate()
            .filter(|&(j, &z)| z > row[label] || (z == row[label] && j < label))
            .count();
        c1 += usize::from(above == 0);
        ck += usize::from(above < k);
    }
    Ok((c1, ck))
}

pub fn evaluate(graph: &ModelGraph, params: &ParamSet, dataset: &Dataset, k: usize) -> Result<Accuracy> {
    evaluate_with(dataset, k, |x| Ok(autodiff::forward(graph, params, x, Mode::Eval)?.0))
}

/// Accuracy of an arbitrary batched inference function.
pub fn evaluate_with(dataset: &Dataset, k: usize, mut infer: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Accuracy> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let (mut c1, mut ck) = (0, 0);
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, labels) = dataset.batch(chunk)?;
        let (a, b) = accuracy_from_logits(&infer(&x)?, &labels, k)?;
        c1 += a;
        ck += b;
    }
    let n = dataset.len() as f64;
    Ok(Accuracy {
        top1: c1 as f64 / n,
        topk: ck as f64 / n,
    })
}

fn augment(x: &mut Tensor, flip: bool, crop: bool, rng: &mut ChaCha8Rng) -> Result<()> {
    let (n, c, h, w) = x.dims4("augment")?;
    let plane = h * w;
    for s in 0..n {
        let mirror = flip && rng.random_bool(0.5);
        let (dy, dx) = if crop {
            (rng.random_range(0..=8i64) - 4, rng.random_range(0..=8i64) - 4)
        } else {
            (0, 0)
        };
        if !mirror && dy == 0 && dx == 0 {
            continue;
        }
        let sample = &mut x.data_mut()[s * c * plane..(s + 1) * c * plane];
        let src = sample.to_vec();
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sx = if mirror { w - 1 - xx } else { xx } as i64 + dx;
                    let sy = y as i64 + dy;
                    sample[ch * plane + y * w + xx] = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        src[ch * plane + sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(())
}

/// Locates the first non-finite value: parameters first, then layer outputs in graph order.
fn diagnose(params: &ParamSet, tape: &autodiff::Tape, graph: &ModelGraph) -> Error {
    for (name, e) in params.iter() {
        if let Some(index) = e.value.first_non_finite() {
            return Error::NonFinite {
                context: format!("parameter {name}"),
                index,
            };
        }
    }
    for node in tape.nodes() {
        if let Some(index) = node.output.first_non_finite() {
            return Error::NonFinite {
                context: format!("output of {}", graph.nodes[node.node].name),
                index,
            };
        }
    }
    Error::NonFinite {
        context: "loss".into(),
        index: 0,
    }
}

pub fn train(config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    config.validate()?;
    let data = config.data.load()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    let eval = match &config.eval_data {
        Some(spec) => spec.load()?,
        None => data.clone(),
    };
    let graph = config.arch.build(&data.sample_shape, data.classes, config.attention.as_ref())?;
    let mut params = graph.init_params(config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_5eed);
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut metrics = Vec::with_capacity(config.epochs);
    observer.on_epoch_end(0, &graph, &params)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let lr = lr_at(config.lr, &config.schedule, epoch as i64)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (mut x, labels) = data.batch(batch)?;
            if config.augment_flip || config.augment_crop {
                augment(&mut x, config.augment_flip, config.augment_crop, &mut rng)?;
            }
            let (logits, tape) = autodiff::forward(&graph, &params, &x, Mode::Train)?;
            let (loss, grad) = autodiff::cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(diagnose(&params, &tape, &graph));
            }
            params.zero_grads();
            autodiff::backward(&graph, &mut params, &tape, &grad)?;
            opt.step(&mut params, lr)?;
            tape.apply_running_stats(&mut params)?;
            loss_sum += loss * batch.len() as f64;
        }
        params.zero_grads();
        let acc = evaluate(&graph, &params, &eval, config.top_k)?;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / data.len() as f64,
            top1: acc.top1,
            topk: acc.topk,
        });
        observer.on_epoch_end(epoch + 1, &graph, &params)?;
    }
    Ok(TrainOutcome { graph, params, metrics })
}
