//! Attention-vector telemetry across training: how much each channel's
//! attention value varies across inputs, and how it moves between epochs.

use crate::autodiff::{self, Mode};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Op};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::TrainObserver;
use std::collections::BTreeMap;
use std::path::Path;

pub const DEFAULT_CONVERGENCE_THRESHOLD: f64 = 1e-3;

/// The attention vector of one module for one probe input at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeRecord {
    pub module: String,
    pub epoch: usize,
    pub probe: usize,
    pub vector: Vec<f64>,
    /// Per-channel spatial mean of the module output `x ⊙ v`.
    pub feature_means: Vec<f64>,
}

/// Records attention vectors of every attention node on a fixed probe batch.
#[derive(Debug, Clone)]
pub struct StripeRecorder {
    probes: Tensor,
    records: Vec<StripeRecord>,
}

impl StripeRecorder {
    pub fn new(probes: Tensor) -> Self {
        StripeRecorder {
            probes,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[StripeRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<StripeRecord> {
        self.records
    }

    pub fn record(&mut self, epoch: usize, graph: &ModelGraph, params: &ParamSet) -> Result<()> {
        let (_, tape) = autodiff::forward(graph, params, &self.probes, Mode::Eval)?;
        for (i, node) in graph.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Attention { .. }) {
                continue;
            }
            let v = tape.attention_vectors(i).expect("attention node records vectors");
            let out = tape.value(i);
            let (n, c) = v.dims2("stripe")?;
            let spatial = out.len() / (n * c);
            for probe in 0..n {
                let feature_means = out
                    .sample(probe)
                    .chunks(spatial)
                    .map(|p| p.iter().sum::<f64>() / spatial as f64)
                    .collect();
                self.records.push(StripeRecord {
                    module: node.name.clone(),
                    epoch,
                    probe,
                    vector: v.sample(probe).to_vec(),
                    feature_means,
                });
            }
        }
        Ok(())
    }
}

impl TrainObserver for StripeRecorder {
    fn on_epoch_end(&mut self, epoch: usize, graph: &ModelGraph, params: &ParamSet) -> Result<()> {
        self.record(epoch, graph, params)
    }
}

fn long_csv(records: &[StripeRecord], pick: impl Fn(&StripeRecord) -> &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["module", "epoch", "probe", "channel", "value"])?;
    for r in records {
        for (c, v) in pick(r).iter().enumerate() {
            w.write_record([r.module.clone(), r.epoch.to_string(), r.probe.to_string(), c.to_string(), v.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Attention values, one row per `(module, epoch, probe, channel)`.
pub fn records_csv(records: &[StripeRecord]) -> Result<String> {
    long_csv(records, |r| &r.vector)
}

/// Channel means of the attention outputs, same layout as [`records_csv`].
pub fn feature_means_csv(records: &[StripeRecord]) -> Result<String> {
    long_csv(records, |r| &r.feature_means)
}

/// Reads a file written by [`records_csv`]; feature means are left empty.
pub fn read_records_csv(path: &Path) -> Result<Vec<StripeRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut grouped: BTreeMap<(String, usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let parse_err = |what: &str| Error::Format {
            offset: row.position().map(|p| p.byte()).unwrap_or(0),
            detail: format!("bad {what} in stripe record"),
        };
        let epoch: usize = field(1).parse().map_err(|_| parse_err("epoch"))?;
        let probe: usize = field(2).parse().map_err(|_| parse_err("probe"))?;
        let channel: usize = field(3).parse().map_err(|_| parse_err("channel"))?;
        let value: f64 = field(4).parse().map_err(|_| parse_err("value"))?;
        grouped.entry((field(0).to_string(), epoch, probe)).or_default().push((channel, value));
    }
    let mut out = Vec::with_capacity(grouped.len());
    for ((module, epoch, probe), mut cells) in grouped {
        cells.sort_by_key(|&(c, _)| c);
        if cells.iter().enumerate().any(|(i, &(c, _))| i != c) {
            return Err(Error::Format {
                offset: 0,
                detail: format!("{module} epoch {epoch} probe {probe}: channels are not contiguous"),
            });
        }
        out.push(StripeRecord {
            module,
            epoch,
            probe,
            vector: cells.into_iter().map(|(_, v)| v).collect(),
            feature_means: Vec::new(),
        });
    }
    Ok(out)
}

/// Epochs present in the records, ascending.
pub fn epochs(records: &[StripeRecord]) -> Vec<usize> {
    let mut e: Vec<usize> = records.iter().map(|r| r.epoch).collect();
    e.sort_unstable();
    e.dedup();
    e
}

/// Population standard deviation across probes of every channel, per module, at `epoch`.
pub fn stripe_channel_std(records: &[StripeRecord], epoch: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut by_module: BTreeMap<&str, Vec<&[f64]>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.epoch == epoch) {
        by_module.entry(&r.module).or_default().push(&r.vector);
    }
    if by_module.is_empty() {
        return Err(Error::State(format!("no stripe records at epoch {epoch}")));
    }
    let mut out = BTreeMap::new();
    for (module, vectors) in by_module {
        if vectors.len() < 2 {
            return Err(Error::State(format!(
                "{module}: a spread across probes needs at least two probes, found {}",
                vectors.len()
            )));
        }
        let n = vectors.len() as f64;
        // Pairwise form of the population variance: exactly zero when every probe agrees,
        // where the mean-based form can leave rounding residue.
        let std = (0..vectors[0].len())
            .map(|c| {
                let sq: f64 = vectors
                    .iter()
                    .enumerate()
                    .flat_map(|(i, a)| vectors[i + 1..].iter().map(move |b| (a[c] - b[c]).powi(2)))
                    .sum();
                (sq / (n * n)).sqrt()
            })
            .collect();
        out.insert(module.to_string(), std);
    }
    Ok(out)
}

/// `|v^{t+1} - v^t|` for one module, probe and channel, labelled by `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstDiff {
    pub module: String,
    pub epoch: usize,
    pub probe: usize,
    pub channel: usize,
    pub delta: f64,
}

/// First differences between consecutive recorded epochs.
pub fn stripe_first_diff(records: &[StripeRecord]) -> Result<Vec<FirstDiff>> {
    let mut series: BTreeMap<(&str, usize), BTreeMap<usize, &[f64]>> = BTreeMap::new();
    for r in records {
        series.entry((&r.module, r.probe)).or_default().insert(r.epoch, &r.vector);
    }
    if epochs(records).len() < 2 {
        return Err(Error::State("first differences need at least two recorded epochs".into()));
    }
    let mut out = Vec::new();
    for ((module, probe), by_epoch) in series {
        let steps: Vec<(&usize, &&[f64])> = by_epoch.iter().collect();
        for w in steps.windows(2) {
            let (&t, a) = w[0];
            let (_, b) = w[1];
            for (channel, (x, y)) in a.iter().zip(b.iter()).enumerate() {
                out.push(FirstDiff {
                    module: module.to_string(),
                    epoch: t,
                    probe,
                    channel,
                    delta: (y - x).abs(),
                });
            }
        }
    }
    Ok(out)
}

/// For each module and channel, the first epoch `t` from which every later
/// difference (over all probes) stays below `threshold`; `None` if the last
/// recorded difference is still above it.
pub fn convergence_epochs(diffs: &[FirstDiff], threshold: f64) -> BTreeMap<(String, usize), Option<usize>> {
    let mut worst: BTreeMap<(String, usize), BTreeMap<usize, f64>> = BTreeMap::new();
    for d in diffs {
        let e = worst
            .entry((d.module.clone(), d.channel))
            .or_default()
            .entry(d.epoch)
            .or_insert(0.0);
        *e = e.max(d.delta);
    }
    worst
        .into_iter()
        .map(|(key, by_epoch)| {
            let mut converged = None;
            for (&t, &delta) in by_epoch.iter().rev() {
                if delta >= threshold {
                    break;
                }
                converged = Some(t);
            }
            (key, converged)
        })
        .collect()
}

pub fn channel_std_csv(records: &[StripeRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["module", "epoch", "channel", "std"])?;
    for epoch in epochs(records) {
        for (module, std) in stripe_channel_std(records, epoch)? {
            for (c, s) in std.iter().enumerate() {
                w.write_record([module.clone(), epoch.to_string(), c.to_string(), s.to_string()])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn first_diff_csv(diffs: &[FirstDiff]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["module", "epoch", "probe", "channel", "delta"])?;
    for d in diffs {
        w.write_record([
            d.module.clone(),
            d.epoch.to_string(),
            d.probe.to_string(),
            d.channel.to_string(),
            d.delta.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn convergence_csv(conv: &BTreeMap<(String, usize), Option<usize>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["module", "channel", "convergence_epoch"])?;
    for ((module, channel), epoch) in conv {
        w.write_record([module.clone(), channel.to_string(), epoch.map(|e| e.to_string()).unwrap_or_default()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(module: &str, epoch: usize, probe: usize, vector: Vec<f64>) -> StripeRecord {
        StripeRecord {
            module: module.into(),
            epoch,
            probe,
            vector,
            feature_means: vec![],
        }
    }

    #[test]
    fn two_point_std() {
        let r = vec![rec("m", 0, 0, vec![0.4, 0.5]), rec("m", 0, 1, vec![0.6, 0.5])];
        let std = &stripe_channel_std(&r, 0).unwrap()["m"];
        assert!((std[0] - 0.1).abs() < 1e-15);
        assert_eq!(std[1], 0.0);
        assert!(stripe_channel_std(&r[..1], 0).is_err());
    }

    #[test]
    fn first_diff_sequence() {
        let r = vec![
            rec("m", 0, 0, vec![0.5]),
            rec("m", 1, 0, vec![0.6]),
            rec("m", 2, 0, vec![0.6]),
        ];
        let d = stripe_first_diff(&r).unwrap();
        assert_eq!(d.len(), 2);
        assert!((d[0].delta - 0.1).abs() < 1e-15);
        assert_eq!(d[1].delta, 0.0);
        let conv = convergence_epochs(&d, DEFAULT_CONVERGENCE_THRESHOLD);
        assert_eq!(conv[&("m".to_string(), 0)], Some(1));
        let moving = convergence_epochs(&d[..1], DEFAULT_CONVERGENCE_THRESHOLD);
        assert_eq!(moving[&("m".to_string(), 0)], None);
        assert!(stripe_first_diff(&r[..1]).is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
