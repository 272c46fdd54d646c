//! Parameter, MAC and inference-throughput measurements.

use crate::autodiff::{self, Mode};
use crate::error::{Error, Result};
use crate::graph::{count_flops_conv, count_params, ModelGraph};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: String,
    pub params: usize,
    pub macs: u64,
    /// Samples per second, median over timed iterations.
    pub throughput: f64,
}

impl BenchRow {
    fn counts(model: &str, graph: &ModelGraph) -> Result<Self> {
        Ok(BenchRow {
            model: model.to_string(),
            params: count_params(graph),
            macs: count_flops_conv(graph, &graph.input_shape)?,
            throughput: 0.0,
        })
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_once(graph: &ModelGraph, params: &ParamSet, x: &Tensor) -> Result<f64> {
    let start = Instant::now();
    std::hint::black_box(autodiff::forward(graph, params, x, Mode::Eval)?);
    Ok(start.elapsed().as_secs_f64())
}

fn bench_input(graph: &ModelGraph, batch: usize) -> Tensor {
    let shape: Vec<usize> = std::iter::once(batch).chain(graph.input_shape.iter().copied()).collect();
    Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0xbe9c))
}

/// Counts for `graph` and the median eval-mode throughput over `iters` batches after `warmup`.
pub fn bench(model: &str, graph: &ModelGraph, params: &ParamSet, batch: usize, warmup: usize, iters: usize) -> Result<BenchRow> {
    Ok(bench_interleaved(&[(model, graph, params)], batch, warmup, iters)?.remove(0))
}

/// Benchmarks several models round-robin so drift in machine load is shared
/// between them instead of biasing whichever ran last.
pub fn bench_interleaved(
    models: &[(&str, &ModelGraph, &ParamSet)],
    batch: usize,
    warmup: usize,
    iters: usize,
) -> Result<Vec<BenchRow>> {
    if iters == 0 || batch == 0 {
        return Err(Error::Config("bench needs at least one iteration and a non-empty batch".into()));
    }
    let inputs: Vec<Tensor> = models.iter().map(|(_, g, _)| bench_input(g, batch)).collect();
    for _ in 0..warmup {
        for ((_, g, p), x) in models.iter().zip(&inputs) {
            time_once(g, p, x)?;
        }
    }
    let mut times = vec![Vec::with_capacity(iters); models.len()];
    for _ in 0..iters {
        for (((_, g, p), x), t) in models.iter().zip(&inputs).zip(&mut times) {
            t.push(time_once(g, p, x)?);
        }
    }
    models
        .iter()
        .zip(times)
        .map(|((name, g, _), t)| {
            let mut row = BenchRow::counts(name, g)?;
            row.throughput = batch as f64 / median(t);
            Ok(row)
        })
        .collect()
}

/// Rows along the three axes: model, parameter count, MACs, throughput.
pub fn bench_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "params", "macs", "throughput"])?;
    for r in rows {
        w.write_record([r.model.clone(), r.params.to_string(), r.macs.to_string(), r.throughput.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
