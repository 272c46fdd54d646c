use crate::config::RunConfig;
use crate::error::{CliError, Result};
use asr_core::analysis::bench::{bench_csv, bench_interleaved};
use asr_core::analysis::noise::{noise_attack_repeated, noise_table_csv, NoiseSpec, DEFAULT_REPEATS};
use asr_core::analysis::stripe::{self, StripeRecorder};
use asr_core::analysis::perturb_trace;
use asr_core::attention::{AttentionKind, PsiMode, SlotMode};
use asr_core::backbones::{build_residual_chain, AttentionConfig};
use asr_core::checkpoint::Checkpoint;
use asr_core::data::{Dataset, DatasetSpec};
use asr_core::fusion::{fuse_model, verify_equivalence, FUSION_TOL};
use asr_core::graph::count_params;
use asr_core::train::{metrics_csv, train, Arch, TrainConfig, TrainOutcome};
use asr_core::{ModelGraph, ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

pub const OUTPUT_ROOT_ENV: &str = "ASR_OUTPUT_ROOT";

/// `<root>/<YYYYmmdd-HHMMSS>-seed<seed>`, suffixed `-2`, `-3`, ... on collision.
pub fn create_run_dir(out: Option<&Path>, seed: u64) -> Result<PathBuf> {
    let root = match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from),
    };
    fs::create_dir_all(&root).map_err(|e| CliError::file(&root, e))?;
    let base = format!("{}-seed{seed}", chrono::Local::now().format("%Y%m%d-%H%M%S"));
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                println!("run_dir={}", dir.display());
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::file(&dir, e)),
        }
    }
    unreachable!("suffixes are unbounded")
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::file(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::file(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::file(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => read_to_string(p)?,
        None => String::new(),
    };
    RunConfig::parse(&text, overrides)
}

fn meta_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| CliError::Core(e.into()))
}

fn meta_value<T: serde::de::DeserializeOwned>(ckpt: &Checkpoint, key: &str) -> Result<Option<T>> {
    ckpt.meta
        .get(key)
        .map(|raw| serde_json::from_str(raw).map_err(|e| CliError::Config(format!("checkpoint meta {key}: {e}"))))
        .transpose()
}

/// Fixed probe inputs for the stripe recorder: a separately seeded synthetic
/// set, or the first samples of the evaluation data.
fn stripe_probes(config: &TrainConfig, count: usize, seed: u64) -> Result<Tensor> {
    let ds = match &config.data {
        DatasetSpec::Synthetic { classes, size, noise, .. } => DatasetSpec::Synthetic {
            classes: *classes,
            samples: count,
            size: *size,
            seed,
            noise: *noise,
        }
        .load()?,
        DatasetSpec::Cifar10Bin { .. } => config.eval_data.as_ref().unwrap_or(&config.data).load()?.take(count),
    };
    if ds.len() < count {
        return Err(CliError::Config(format!("stripe.probes: only {} samples available", ds.len())));
    }
    Ok(ds.batch(&(0..count).collect::<Vec<_>>())?.0)
}

fn checkpoint_of(config: &TrainConfig, outcome: &TrainOutcome) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(outcome.graph.clone(), outcome.params.clone())?;
    ckpt.meta.insert("arch".into(), meta_json(&config.arch)?);
    ckpt.meta.insert("data".into(), meta_json(&config.data)?);
    if let Some(eval) = &config.eval_data {
        ckpt.meta.insert("eval_data".into(), meta_json(eval)?);
    }
    ckpt.meta.insert("seed".into(), config.seed.to_string());
    Ok(ckpt)
}

pub fn train_cmd(config: Option<&Path>, overrides: &[String], out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let tc = cfg.train_config()?;
    let stripe = cfg.stripe()?;
    let dir = create_run_dir(out, tc.seed)?;
    write(&dir, "config.ini", cfg.echo())?;

    let (outcome, records) = if stripe.enabled {
        let mut rec = StripeRecorder::new(stripe_probes(&tc, stripe.probes, stripe.probe_seed)?);
        let outcome = train(&tc, &mut rec)?;
        (outcome, Some(rec.into_records()))
    } else {
        (train(&tc, &mut ())?, None)
    };
    write(&dir, "metrics.csv", metrics_csv(&outcome.metrics)?)?;
    write(&dir, "model.ckpt", checkpoint_of(&tc, &outcome)?.to_bytes()?)?;
    if let Some(records) = records {
        write(&dir, "stripe_records.csv", stripe::records_csv(&records)?)?;
        write(&dir, "stripe_features.csv", stripe::feature_means_csv(&records)?)?;
    }
    if let Some(m) = outcome.metrics.last() {
        println!("epoch={} loss={} top1={} top{}={}", m.epoch, m.loss, m.top1, tc.top_k, m.topk);
    }
    Ok(())
}

pub fn fuse_cmd(input: &Path, output: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(input)?;
    let seed = ckpt.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let fused = fuse_model(&ckpt.graph, &ckpt.params)?;
    let dir = create_run_dir(out, seed)?;
    let mut fc = Checkpoint::new(fused.graph, fused.params)?;
    fc.meta = ckpt.meta.clone();
    let target = output.map_or_else(|| dir.join("fused.ckpt"), Path::to_path_buf);
    fs::write(&target, fc.to_bytes()?).map_err(|e| CliError::file(&target, e))?;
    write(&dir, "fusion_report.csv", fused.report.to_csv()?)?;
    println!("fused={} slots={} max_dev={:e}", target.display(), fused.report.rows.len(), fused.report.global_dev);
    Ok(())
}

pub fn verify_cmd(a: &Path, b: &Path, n: usize, tol: f64, seed: u64) -> Result<()> {
    let (ca, cb) = (load_checkpoint(a)?, load_checkpoint(b)?);
    let eq = verify_equivalence((&ca.graph, &ca.params), (&cb.graph, &cb.params), n, seed, tol)?;
    println!("max_dev={:e} tol={:e} passed={}", eq.max_dev, eq.tol, eq.passed);
    if eq.passed {
        Ok(())
    } else {
        Err(CliError::NotEquivalent {
            deviation: eq.max_dev,
            tol,
        })
    }
}

pub fn stripe_cmd(records: &Path, threshold: f64, out: Option<&Path>) -> Result<()> {
    let path = if records.is_dir() {
        records.join("stripe_records.csv")
    } else {
        records.to_path_buf()
    };
    if !path.exists() {
        return Err(CliError::file(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let recs = stripe::read_records_csv(&path)?;
    let epochs = stripe::epochs(&recs);
    let diffs = stripe::stripe_first_diff(&recs)?;
    let conv = stripe::convergence_epochs(&diffs, threshold);
    let dir = create_run_dir(out, 0)?;
    write(&dir, "channel_std.csv", stripe::channel_std_csv(&recs)?)?;
    write(&dir, "first_diff.csv", stripe::first_diff_csv(&diffs)?)?;
    write(&dir, "convergence.csv", stripe::convergence_csv(&conv)?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "median_std", "max_std"])?;
    for &e in &epochs {
        let all: Vec<f64> = stripe::stripe_channel_std(&recs, e)?.into_values().flatten().collect();
        let max = all.iter().copied().fold(0.0, f64::max);
        w.write_record([e.to_string(), stripe::median(&all).to_string(), max.to_string()])?;
    }
    write(&dir, "stripe_summary.csv", csv_bytes(w)?)?;
    let converged = conv.values().filter(|c| c.is_some()).count();
    println!("epochs={} channels={} converged={converged}", epochs.len(), conv.len());
    Ok(())
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| CliError::Core(asr_core::Error::Io(e.into_error())))
}

pub struct ChainShape {
    pub depth: usize,
    pub width: usize,
    pub psi_std: f64,
}

pub fn perturb_cmd(
    checkpoint: Option<&Path>,
    chain: &ChainShape,
    eps: &[f64],
    trials: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if trials == 0 || eps.is_empty() {
        return Err(CliError::Config("perturb needs at least one trial and one eps".into()));
    }
    let fixed = checkpoint.map(load_checkpoint).transpose()?;
    let dir = create_run_dir(out, seed)?;
    let mut rows = csv::Writer::from_writer(Vec::new());
    rows.write_record(["trial", "eps", "t", "eps_t", "alpha_t", "w_norm", "factor", "eps_next"])?;
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["trial", "eps", "blocks", "eps_final", "bound", "bound_without_attention", "holds"])?;
    let mut violations = 0;
    for trial in 0..trials as u64 {
        let trial_seed = seed.wrapping_add(trial);
        let (graph, params) = match &fixed {
            Some(c) => (c.graph.clone(), c.params.clone()),
            None => {
                let att = AttentionConfig::new(
                    AttentionKind::Ie,
                    SlotMode::Asr {
                        psi: PsiMode::FrozenGaussian {
                            std: chain.psi_std,
                            seed: trial_seed,
                        },
                    },
                );
                let g = build_residual_chain(chain.depth, chain.width, Some(&att))?;
                let p = g.init_params(trial_seed)?;
                (g, p)
            }
        };
        let x0 = Tensor::uniform(&graph.input_shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(trial_seed));
        for &e in eps {
            let trace = perturb_trace(&graph, &params, &x0, e, trial_seed)?;
            for r in &trace.rows {
                rows.write_record([
                    trial.to_string(),
                    e.to_string(),
                    r.t.to_string(),
                    r.eps_in.to_string(),
                    r.alpha.to_string(),
                    r.w_norm.to_string(),
                    r.factor().to_string(),
                    r.eps_out.to_string(),
                ])?;
            }
            let holds = trace.holds(1e-9);
            violations += usize::from(!holds);
            summary.write_record([
                trial.to_string(),
                e.to_string(),
                trace.rows.len().to_string(),
                trace.final_eps().to_string(),
                trace.bound().to_string(),
                trace.bound_without_attention().to_string(),
                holds.to_string(),
            ])?;
        }
    }
    write(&dir, "perturbation.csv", csv_bytes(rows)?)?;
    write(&dir, "perturbation_summary.csv", csv_bytes(summary)?)?;
    println!("traces={} violations={violations}", trials * eps.len());
    Ok(())
}

/// `const:a,b` or `rand:sa,sb`.
pub fn parse_noise_spec(text: &str, seed: u64) -> Result<NoiseSpec> {
    let bad = || CliError::Config(format!("noise spec {text:?} is not const:a,b or rand:sa,sb"));
    let (mode, values) = text.split_once(':').ok_or_else(bad)?;
    let (a, b) = values.split_once(',').ok_or_else(bad)?;
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    let spec = match mode {
        "const" => NoiseSpec::Constant { na: a, nb: b },
        "rand" => NoiseSpec::Random {
            sigma_a: a,
            sigma_b: b,
            seed,
        },
        _ => return Err(bad()),
    };
    spec.validate()?;
    Ok(spec)
}

pub const DEFAULT_NOISE_SPECS: [&str; 8] = [
    "const:1.0,0.0",
    "const:0.8,0.8",
    "const:0.8,0.5",
    "const:0.5,0.5",
    "const:0.5,0.2",
    "rand:0.1,0.1",
    "rand:0.1,0.2",
    "rand:0.2,0.1",
];

/// `label=path`, or a bare path labelled by itself.
fn labelled(model: &str) -> (String, PathBuf) {
    match model.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => (model.to_string(), PathBuf::from(model)),
    }
}

fn eval_set_of(ckpt: &Checkpoint) -> Result<Dataset> {
    let spec: Option<DatasetSpec> = match meta_value(ckpt, "eval_data")? {
        Some(s) => Some(s),
        None => meta_value(ckpt, "data")?,
    };
    let spec = spec.ok_or_else(|| CliError::Config("checkpoint records no dataset; pass --config".into()))?;
    Ok(spec.load()?)
}

pub fn noise_cmd(
    models: &[String],
    specs: &[String],
    repeats: usize,
    seed: u64,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    if models.is_empty() {
        return Err(CliError::Config("noise needs at least one --model".into()));
    }
    let loaded = models
        .iter()
        .map(|m| {
            let (label, path) = labelled(m);
            Ok((label, load_checkpoint(&path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = match config {
        Some(p) => {
            let tc = load_config(Some(p), &[])?.train_config()?;
            tc.eval_data.as_ref().unwrap_or(&tc.data).load()?
        }
        None => eval_set_of(&loaded[0].1)?,
    };
    let specs: Vec<&str> = if specs.is_empty() {
        DEFAULT_NOISE_SPECS.to_vec()
    } else {
        specs.iter().map(String::as_str).collect()
    };
    let dir = create_run_dir(out, seed)?;
    let mut table = Vec::new();
    for text in specs {
        let spec = parse_noise_spec(text, seed)?;
        let n = if matches!(spec, NoiseSpec::Constant { .. }) { 1 } else { repeats };
        for (label, ckpt) in &loaded {
            let summary = noise_attack_repeated(&ckpt.graph, &ckpt.params, &dataset, spec, n)?;
            println!("noise={} model={label} top1={} std={}", spec.label(), summary.mean(), summary.std());
            table.push((label.clone(), summary));
        }
    }
    write(&dir, "noise.csv", noise_table_csv(&table)?)?;
    Ok(())
}

pub const DEFAULT_NOISE_REPEATS: usize = DEFAULT_REPEATS;

fn baseline_of(ckpt: &Checkpoint) -> Result<Option<(ModelGraph, ParamSet)>> {
    let Some(arch) = meta_value::<Arch>(ckpt, "arch")? else {
        return Ok(None);
    };
    let g = arch.build(&ckpt.graph.input_shape, ckpt.graph.classes, None)?;
    let p = g.init_params(0)?;
    Ok(Some((g, p)))
}

pub fn bench_cmd(checkpoint: &Path, batch: usize, warmup: usize, iters: usize, out: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let baseline = baseline_of(&ckpt)?;
    let fused = if ckpt.graph.has_attention() {
        Some(fuse_model(&ckpt.graph, &ckpt.params)?)
    } else {
        None
    };
    let mut models: Vec<(&str, &ModelGraph, &ParamSet)> = Vec::new();
    if let Some((g, p)) = &baseline {
        models.push(("baseline", g, p));
    }
    match &fused {
        Some(f) => {
            models.push(("asr", &ckpt.graph, &ckpt.params));
            models.push(("asr_fused", &f.graph, &f.params));
        }
        None => models.push(("model", &ckpt.graph, &ckpt.params)),
    }
    let rows = bench_interleaved(&models, batch, warmup, iters)?;
    let dir = create_run_dir(out, 0)?;
    write(&dir, "bench.csv", bench_csv(&rows)?)?;
    for r in &rows {
        println!("model={} params={} macs={} throughput={}", r.model, r.params, r.macs, r.throughput);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Position,
    Delta,
    Init,
    PsiMode,
    NoBody,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Position => "position",
            Axis::Delta => "delta",
            Axis::Init => "init",
            Axis::PsiMode => "psi_mode",
            Axis::NoBody => "no_body",
        }
    }

    /// `(label, overrides)` per sweep row.
    fn variants(self) -> Vec<(String, Vec<(&'static str, String)>)> {
        let asr = || ("model.mode", "asr".to_string());
        let none = || ("model.attention", "none".to_string());
        match self {
            Axis::Position => std::iter::once(("none".to_string(), vec![none()]))
                .chain(asr_core::PositionTag::ALL.iter().map(|p| {
                    (format!("{} {}", p.label(), p.as_str()), vec![asr(), ("model.position", p.as_str().to_string())])
                }))
                .collect(),
            Axis::Delta => (1..=4).map(|d| (d.to_string(), vec![asr(), ("model.delta", d.to_string())])).collect(),
            Axis::Init => [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
                .iter()
                .map(|v| {
                    let o = vec![asr(), ("model.psi", "learnable".to_string()), ("model.psi_value", v.to_string())];
                    (v.to_string(), o)
                })
                .collect(),
            Axis::PsiMode => {
                let mut rows = vec![("learnable".to_string(), vec![asr(), ("model.psi", "learnable".to_string())])];
                for v in [0.1, 0.3, 0.5] {
                    rows.push((
                        format!("C{v}"),
                        vec![asr(), ("model.psi", "constant".to_string()), ("model.psi_value", v.to_string())],
                    ));
                }
                for v in [0.1, 0.3, 0.5] {
                    rows.push((
                        format!("N{v}"),
                        vec![asr(), ("model.psi", "gaussian".to_string()), ("model.psi_std", v.to_string())],
                    ));
                }
                rows
            }
            Axis::NoBody => vec![
                ("none".to_string(), vec![none()]),
                ("no_body".to_string(), vec![("model.mode", "no_body".to_string())]),
                ("asr".to_string(), vec![asr()]),
            ],
        }
    }
}

pub fn ablate_cmd(axis: Axis, config: Option<&Path>, overrides: &[String], out: Option<&Path>) -> Result<()> {
    let base = load_config(config, overrides)?;
    if base.attention()?.is_none() {
        return Err(CliError::Config(format!(
            "model.attention: the {} sweep needs an attention kind",
            axis.name()
        )));
    }
    let seed = base.seed()?;
    let dir = create_run_dir(out, seed)?;
    write(&dir, "config.ini", base.echo())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "value", "loss", "top1", "topk", "params", "fused_params", "fused_dev"])?;
    for (label, sets) in axis.variants() {
        let mut cfg = base.clone();
        for (k, v) in &sets {
            cfg.set(k, v)?;
        }
        let tc = cfg.train_config()?;
        let outcome = train(&tc, &mut ())?;
        let last = outcome
            .metrics
            .last()
            .ok_or_else(|| CliError::Config("train.epochs: ablation needs at least one epoch".into()))?;
        let (fused_params, dev) = if outcome.graph.has_attention() {
            let f = fuse_model(&outcome.graph, &outcome.params)?;
            let eq = verify_equivalence(
                (&outcome.graph, &outcome.params),
                (&f.graph, &f.params),
                asr_core::fusion::VERIFY_SAMPLES,
                seed,
                FUSION_TOL,
            )?;
            (count_params(&f.graph).to_string(), eq.max_dev.to_string())
        } else {
            (count_params(&outcome.graph).to_string(), "0".to_string())
        };
        println!("axis={} value={label} top1={} fused_params={fused_params}", axis.name(), last.top1);
        w.write_record([
            axis.name().to_string(),
            label,
            last.loss.to_string(),
            last.top1.to_string(),
            last.topk.to_string(),
            count_params(&outcome.graph).to_string(),
            fused_params,
            dev,
        ])?;
    }
    write(&dir, "ablate.csv", csv_bytes(w)?)?;
    Ok(())
}
