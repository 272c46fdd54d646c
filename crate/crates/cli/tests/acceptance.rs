//! Acceptance suite. Each criterion runs in turn and prints one line:
//! `criterion <n> <name>: PASS|FAIL <seconds>s <detail>`.
//! The process exits non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use asr_core::analysis::stripe::{self, StripeRecorder};
use asr_core::analysis::{bench_interleaved, noise_attack_eval, noise_attack_repeated, perturb_trace, NoiseSpec};
use asr_core::analysis::noise::noise_table_csv;
use asr_core::attention::{AttentionKind, AttentionSlot, PsiMode, SlotMode};
use asr_core::backbones::{build_residual_chain, build_toy_resnet, build_toy_vgg, AttentionConfig};
use asr_core::data::DatasetSpec;
use asr_core::fusion::{
    fold_into_attention_value, fold_into_bn, fold_into_conv, fold_into_fc, fuse_model, linear_attention,
    verify_equivalence, FUSION_TOL, VERIFY_SAMPLES,
};
use asr_core::graph::{count_flops_conv, count_params, GraphBuilder, ModelGraph, Op, PositionTag, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use asr_core::ops::{self, BatchNormParams};
use asr_core::optim::Schedule;
use asr_core::params::{ParamKind, ParamSet};
use asr_core::spectral::{spectral_norm, DenseOperator};
use asr_core::tensor::{ConvSpec, Tensor};
use asr_core::train::{evaluate, train, Arch, TrainConfig, TrainOutcome};
use common::{check_graph, rng};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

/// Name, runtime budget in seconds, check.
type Criterion = (&'static str, u64, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().max_abs()
}

fn unit_vector<R: Rng>(c: usize, r: &mut R) -> Tensor {
    Tensor::uniform(&[c], 1e-3, 1.0 - 1e-3, r)
}

fn fold_soundness() -> Outcome {
    const INSTANCES: usize = 1000;
    const TOL: f64 = 1e-12;
    let mut r = rng(1);
    let mut worst = [0.0f64; 4];
    for _ in 0..INSTANCES {
        let (cin, cout, hw) = (r.random_range(1..5), r.random_range(1..9), r.random_range(3..7));
        let bias = r.random_bool(0.5);
        let x = Tensor::uniform(&[2, cin, hw, hw], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[cout, cin, 3, 3], -1.0, 1.0, &mut r);
        let b = bias.then(|| Tensor::uniform(&[cout], -1.0, 1.0, &mut r));
        let v = unit_vector(cout, &mut r);
        let spec = ConvSpec::new(r.random_range(1..3), r.random_range(0..2)).unwrap();
        let (k2, b2) = fold_into_conv(&k, b.as_ref(), &v).unwrap();
        let fused = ops::conv2d(&x, &k2, b2.as_ref(), spec).unwrap();
        let unfused = ops::channel_mul(&ops::conv2d(&x, &k, b.as_ref(), spec).unwrap(), &v).unwrap();
        worst[0] = worst[0].max(max_abs_diff(&fused, &unfused));

        let c = r.random_range(1..9);
        let x = Tensor::uniform(&[3, c, 2, 2], -1.0, 1.0, &mut r);
        let mean = Tensor::uniform(&[c], -0.5, 0.5, &mut r);
        let var = Tensor::uniform(&[c], 0.1, 2.0, &mut r);
        let gamma = Tensor::uniform(&[c], -1.0, 1.0, &mut r);
        let beta = Tensor::uniform(&[c], -1.0, 1.0, &mut r);
        let v = unit_vector(c, &mut r);
        let (g2, b2) = fold_into_bn(&gamma, &beta, &v).unwrap();
        let bn = |g: &Tensor, b: &Tensor| {
            let p = BatchNormParams { mean: &mean, var: &var, gamma: g, beta: b, eps: DEFAULT_BN_EPS };
            ops::batchnorm_infer(&x, &p).unwrap()
        };
        worst[1] = worst[1].max(max_abs_diff(&bn(&g2, &b2), &ops::channel_mul(&bn(&gamma, &beta), &v).unwrap()));

        let (din, dout) = (r.random_range(1..17), r.random_range(1..17));
        let x = Tensor::uniform(&[4, din], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[dout, din], -1.0, 1.0, &mut r);
        let b = bias.then(|| Tensor::uniform(&[dout], -1.0, 1.0, &mut r));
        let v = unit_vector(dout, &mut r);
        let (w2, b2) = fold_into_fc(&w, b.as_ref(), &v).unwrap();
        let fused = ops::linear(&x, &w2, b2.as_ref()).unwrap();
        let unfused = ops::channel_mul(&ops::linear(&x, &w, b.as_ref()).unwrap(), &v).unwrap();
        worst[2] = worst[2].max(max_abs_diff(&fused, &unfused));

        let (t, d, dk, dv) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..5), r.random_range(1..5));
        let x = Tensor::uniform(&[t, d], -1.0, 1.0, &mut r);
        let wq = Tensor::uniform(&[dk, d], -1.0, 1.0, &mut r);
        let wk = Tensor::uniform(&[dk, d], -1.0, 1.0, &mut r);
        let wv = Tensor::uniform(&[dv, d], -1.0, 1.0, &mut r);
        let v = unit_vector(dv, &mut r);
        let fused = linear_attention(&x, &wq, &wk, &fold_into_attention_value(&wv, &v).unwrap()).unwrap();
        let unfused = ops::channel_mul(&linear_attention(&x, &wq, &wk, &wv).unwrap(), &v).unwrap();
        worst[3] = worst[3].max(max_abs_diff(&fused, &unfused));
    }
    check(
        worst.iter().all(|&w| w <= TOL),
        format!(
            "{INSTANCES} instances each; max dev conv={:e} bn={:e} fc={:e} attention_value={:e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn toy_config(arch: Arch, attention: Option<AttentionConfig>, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        arch,
        attention,
        data: DatasetSpec::Synthetic { classes: 4, samples: 64, size: 8, seed: 1, noise: 0.3 },
        eval_data: Some(DatasetSpec::Synthetic { classes: 4, samples: 64, size: 8, seed: 2, noise: 0.3 }),
        epochs,
        batch_size: 16,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        schedule: Schedule::Constant,
        seed,
        top_k: 2,
        augment_flip: false,
        augment_crop: false,
    }
}

fn end_to_end_fusion() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut runs = 0;
    for arch in [Arch::Resnet { blocks: 1, width: 8 }, Arch::Vgg { stages: 2, width: 8 }] {
        let baseline = count_params(&arch.build(&[3, 8, 8], 4, None).unwrap());
        for kind in AttentionKind::all_defaults() {
            for pos in PositionTag::ALL {
                let att = AttentionConfig::new(kind.clone(), SlotMode::Asr { psi: PsiMode::default() }).at(pos);
                let TrainOutcome { graph, params, .. } = train(&toy_config(arch.clone(), Some(att), 5, 11), &mut ()).unwrap();
                let fused = fuse_model(&graph, &params).unwrap();
                let eq = verify_equivalence(
                    (&graph, &params),
                    (&fused.graph, &fused.params),
                    VERIFY_SAMPLES,
                    asr_core::fusion::VERIFY_SEED,
                    FUSION_TOL,
                )
                .unwrap();
                worst = worst.max(eq.max_dev);
                let size = count_params(&fused.graph);
                if !eq.passed || size != baseline {
                    failures.push(format!("{arch:?}/{}/{pos}: dev {:e} params {size} vs {baseline}", kind.name(), eq.max_dev));
                }
                runs += 1;
            }
        }
    }
    check(
        failures.is_empty(),
        format!("{runs} trained models; worst relative dev {worst:e}; failures {failures:?}"),
    )
}

fn perturbation_bound() -> Outcome {
    const CHAINS: u64 = 1000;
    let mut r = rng(3);
    let mut traces = 0;
    let mut violations = Vec::new();
    let mut tightest: f64 = 0.0;
    for trial in 0..CHAINS {
        let (depth, width) = (r.random_range(1..=8), r.random_range(1..=16));
        let psi = PsiMode::FrozenGaussian { std: r.random_range(0.1..3.0), seed: trial };
        let cfg = AttentionConfig::new(AttentionKind::Ie, SlotMode::Asr { psi }).stacked(r.random_range(1..=2));
        let g = build_residual_chain(depth, width, Some(&cfg)).unwrap();
        let p = g.init_params(trial).unwrap();
        let x0 = Tensor::uniform(&[width], -1.0, 1.0, &mut r);
        for eps in [1e-3, 1e-2, 1e-1] {
            let trace = perturb_trace(&g, &p, &x0, eps, trial).unwrap();
            traces += 1;
            tightest = tightest.max(trace.final_eps() / (eps * trace.bound()));
            if !trace.holds(1e-9) {
                violations.push(format!("chain {trial} eps {eps}"));
            }
        }
    }
    check(
        violations.is_empty(),
        format!("{traces} traces; max final/bound ratio {tightest:.6}; violations {violations:?}"),
    )
}

fn jitter(params: &mut ParamSet, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = params
        .iter()
        .filter(|(n, e)| e.kind == ParamKind::Trainable && !n.ends_with(".psi"))
        .map(|(n, _)| n.clone())
        .collect();
    for n in names {
        let t = params.get(&n).unwrap();
        let moved = t.add(&Tensor::uniform(t.shape(), -0.3, 0.3, &mut r)).unwrap();
        params.set(&n, moved).unwrap();
    }
}

fn single(input: &[usize], width: usize, build: impl FnOnce(&mut GraphBuilder) -> usize) -> ModelGraph {
    let mut b = GraphBuilder::new(input.to_vec(), width);
    let last = build(&mut b);
    b.push("flat", Op::Flatten, vec![last]);
    b.finish().unwrap()
}

fn slot(kind: AttentionKind, channels: usize, mode: SlotMode) -> AttentionSlot {
    AttentionSlot {
        id: "attn".into(),
        kind,
        channels,
        mode,
        position: PositionTag::AfterLastBn,
        delta_index: 0,
    }
}

fn gradients() -> Outcome {
    const TOL: f64 = 1e-6;
    let bn = |channels| Op::BatchNorm { channels, eps: DEFAULT_BN_EPS, momentum: DEFAULT_BN_MOMENTUM };
    let mut cases: Vec<(String, ModelGraph, usize)> = Vec::new();
    let spec = ConvSpec::new(2, 1).unwrap();
    let out = spec.output_dim(5, 3).unwrap();
    cases.push((
        "conv2d".into(),
        single(&[2, 5, 5], 3 * out * out, |b| {
            b.push("conv", Op::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, spec, bias: true }, vec![0])
        }),
        2,
    ));
    cases.push(("batchnorm".into(), single(&[3, 2, 2], 12, |b| b.push("bn", bn(3), vec![0])), 4));
    cases.push(("relu".into(), single(&[3, 2, 2], 12, |b| b.push("relu", Op::Relu, vec![0])), 3));
    cases.push(("avgpool2".into(), single(&[2, 4, 4], 8, |b| b.push("pool", Op::AvgPool2, vec![0])), 2));
    let mut b = GraphBuilder::new(vec![3, 3, 3], 3);
    b.push("gap", Op::GlobalAvgPool, vec![0]);
    cases.push(("global_avg_pool".into(), b.finish().unwrap(), 2));
    let mut b = GraphBuilder::new(vec![5], 4);
    let l = b.push("a", Op::Linear { in_features: 5, out_features: 4, bias: true }, vec![0]);
    let r = b.push("b", Op::Linear { in_features: 5, out_features: 4, bias: false }, vec![0]);
    b.push("add", Op::Add, vec![l, r]);
    cases.push(("linear+add".into(), b.finish().unwrap(), 3));
    let kinds = [
        AttentionKind::Se { reduction: 2 },
        AttentionKind::Ie,
        AttentionKind::Srm,
        AttentionKind::Spa { levels: vec![1, 2, 4], reduction: 2 },
        AttentionKind::Eca { kernel: 3 },
        AttentionKind::CbamChannel { reduction: 2 },
    ];
    for kind in kinds {
        let name = kind.name();
        let g = single(&[4, 4, 4], 64, |b| b.attention(slot(kind.clone(), 4, SlotMode::Standard), 0));
        cases.push((format!("standard {name}"), g, 2));
        let asr = SlotMode::Asr { psi: PsiMode::Learnable { init: 0.3 } };
        let g = single(&[4, 3, 3], 36, |b| b.attention(slot(kind, 4, asr), 0));
        cases.push((format!("asr {name}"), g, 2));
    }
    let no_body = SlotMode::NoBody { psi: PsiMode::Learnable { init: 0.2 } };
    cases.push(("no body".into(), single(&[4, 3, 3], 36, |b| b.attention(slot(AttentionKind::Ie, 4, no_body), 0)), 2));
    let asr = AttentionConfig::new(AttentionKind::Se { reduction: 2 }, SlotMode::Asr { psi: PsiMode::default() });
    for pos in PositionTag::ALL {
        let g = build_toy_resnet(1, 4, 3, &[3, 4, 4], Some(&asr.clone().at(pos).stacked(2))).unwrap();
        cases.push((format!("resnet {pos}"), g, 3));
    }
    cases.push(("vgg".into(), build_toy_vgg(2, 4, 3, &[3, 4, 4], Some(&asr)).unwrap(), 3));

    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut checked = 0;
    for (i, (name, graph, batch)) in cases.iter().enumerate() {
        let seed = 100 + 10 * i as u64;
        let mut params = graph.init_params(seed).unwrap();
        jitter(&mut params, seed + 1);
        let shape: Vec<usize> = std::iter::once(*batch).chain(graph.input_shape.iter().copied()).collect();
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed + 2));
        let report = check_graph(graph, &params, &x, seed + 3);
        checked += report.checked;
        worst = worst.max(report.worst);
        if report.worst >= TOL || report.checked == 0 || report.skipped_kinks * 10 > report.checked {
            failures.push(format!("{name}: {:e} at {} ({} kinks)", report.worst, report.worst_at, report.skipped_kinks));
        }
    }
    check(
        failures.is_empty(),
        format!("{} graphs, {checked} coordinates; worst relative error {worst:e}; failures {failures:?}", cases.len()),
    )
}

fn spectral_norm_oracle() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, n) = (r.random_range(1..=64), r.random_range(1..=64));
        let a = Tensor::uniform(&[m, n], -1.0, 1.0, &mut r);
        let estimate = spectral_norm(&DenseOperator::new(&a).unwrap(), 20_000, 1e-15);
        let oracle = nalgebra::DMatrix::from_row_slice(m, n, a.data()).singular_values().max();
        worst = worst.max((estimate - oracle).abs() / oracle);
    }
    check(worst <= 1e-6, format!("100 matrices; worst relative error {worst:e}"))
}

fn stripe_machinery() -> Outcome {
    let cfg = TrainConfig {
        arch: Arch::Resnet { blocks: 2, width: 8 },
        attention: Some(AttentionConfig::new(AttentionKind::Se { reduction: 4 }, SlotMode::Standard)),
        data: DatasetSpec::Synthetic { classes: 4, samples: 128, size: 8, seed: 1, noise: 0.3 },
        eval_data: None,
        epochs: 30,
        batch_size: 16,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        schedule: Schedule::Step { milestones: vec![10, 20], gamma: 0.1 },
        seed: 3,
        top_k: 2,
        augment_flip: false,
        augment_crop: false,
    };
    let probes = DatasetSpec::Synthetic { classes: 4, samples: 16, size: 8, seed: 9, noise: 0.3 }.load().unwrap();
    let (x, _) = probes.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let mut rec = StripeRecorder::new(x);
    train(&cfg, &mut rec).unwrap();
    let records = rec.into_records();

    let median_at = |epoch| {
        let all: Vec<f64> = stripe::stripe_channel_std(&records, epoch).unwrap().into_values().flatten().collect();
        stripe::median(&all)
    };
    let (first, last) = (median_at(1), median_at(30));
    let diffs = stripe::stripe_first_diff(&records).unwrap();
    let conv = stripe::convergence_epochs(&diffs, stripe::DEFAULT_CONVERGENCE_THRESHOLD);
    let mut channels: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        channels.insert(&r.module, r.vector.len());
    }
    let expected: usize = channels.values().sum();
    let every_channel = conv.len() == expected
        && channels.iter().all(|(m, &c)| (0..c).all(|ch| conv.contains_key(&(m.to_string(), ch))));
    let shaped = !stripe::channel_std_csv(&records).unwrap().is_empty()
        && !stripe::first_diff_csv(&diffs).unwrap().is_empty()
        && !stripe::convergence_csv(&conv).unwrap().is_empty();
    let converged = conv.values().filter(|c| c.is_some()).count();
    check(
        last < first && every_channel && shaped,
        format!(
            "median channel std epoch 1 = {first:.6}, epoch 30 = {last:.6}; convergence epochs for {}/{expected} channels ({converged} converged)",
            conv.len()
        ),
    )
}

fn noise_harness() -> Outcome {
    const SEEDS: u64 = 5;
    const REPEATS: usize = 5;
    let eval = DatasetSpec::Synthetic { classes: 4, samples: 64, size: 8, seed: 2, noise: 0.3 }.load().unwrap();
    let arch = Arch::Resnet { blocks: 1, width: 8 };
    let ie = AttentionConfig::new(AttentionKind::Ie, SlotMode::Asr { psi: PsiMode::default() });
    let mut problems = Vec::new();
    let mut drops = [Vec::new(), Vec::new()];
    let mut table = Vec::new();
    for seed in 0..SEEDS {
        for (m, (label, att)) in [("origin", None), ("asr_ie", Some(ie.clone()))].into_iter().enumerate() {
            let out = train(&toy_config(arch.clone(), att, 5, seed), &mut ()).unwrap();
            let (g, p) = (&out.graph, &out.params);
            let clean = evaluate(g, p, &eval, 1).unwrap();
            let identity = noise_attack_eval(g, p, &eval, NoiseSpec::Constant { na: 1.0, nb: 0.0 }, 1).unwrap();
            let zero = noise_attack_eval(g, p, &eval, NoiseSpec::Random { sigma_a: 0.0, sigma_b: 0.0, seed }, 1).unwrap();
            if identity != clean || zero != identity {
                problems.push(format!("{label} seed {seed}: clean {clean:?} identity {identity:?} zero {zero:?}"));
            }
            let attacked = noise_attack_eval(g, p, &eval, NoiseSpec::Constant { na: 0.5, nb: 0.5 }, 1).unwrap();
            drops[m].push(clean.top1 - attacked.top1);
            if seed == 0 {
                for spec in [
                    NoiseSpec::Random { sigma_a: 0.1, sigma_b: 0.1, seed: 0 },
                    NoiseSpec::Random { sigma_a: 0.1, sigma_b: 0.2, seed: 0 },
                    NoiseSpec::Random { sigma_a: 0.2, sigma_b: 0.1, seed: 0 },
                ] {
                    table.push((label.to_string(), noise_attack_repeated(g, p, &eval, spec, REPEATS).unwrap()));
                }
            }
        }
    }
    let csv = noise_table_csv(&table).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let shaped = lines[0] == "noise,model,top1_mean,top1_std,repeats"
        && lines.len() == 1 + table.len()
        && lines[1..].iter().all(|l| l.ends_with(&format!(",{REPEATS}")));
    if !shaped {
        problems.push(format!("table shape: {lines:?}"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (plain, asr) = (mean(&drops[0]), mean(&drops[1]));
    let fewer = drops[0].iter().zip(&drops[1]).filter(|(p, a)| a < p).count();
    check(
        problems.is_empty(),
        format!(
            "identity and zero-sigma rows exact over {SEEDS} seeds x 2 models; table {} rows x {REPEATS} repeats; \
             top-1 drop under (0.5,0.5): plain {plain:.4}, asr {asr:.4}, asr degrades less in {fewer}/{SEEDS} seeds (reported); {problems:?}",
            table.len()
        ),
    )
}

fn asr_bin(out: &Path, args: &[&str]) -> (PathBuf, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_asr"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("ASR_OUTPUT_ROOT")
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    let dir = stdout.lines().find_map(|l| l.strip_prefix("run_dir=")).map(PathBuf::from).unwrap_or_default();
    (dir, stdout)
}

/// Adds every file of `dir` under `name/<file>`. Bench throughput is
/// wall-clock time and is dropped; its counts are kept.
fn collect(files: &mut BTreeMap<String, Vec<u8>>, name: &str, dir: &Path) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let mut bytes = std::fs::read(&path).unwrap();
        if path.file_name().unwrap() == "bench.csv" {
            let counts: Vec<String> = String::from_utf8(bytes)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect();
            bytes = counts.join("\n").into_bytes();
        }
        files.insert(format!("{name}/{}", path.file_name().unwrap().to_string_lossy()), bytes);
    }
}

/// Runs every command once under `root` and gathers the artifacts.
fn pipeline(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let toy = [
        "data.size=8", "data.samples=48", "data.eval_samples=24", "data.classes=4", "model.width=4",
        "model.blocks=1", "train.epochs=2", "train.batch_size=16", "train.top_k=2",
    ];
    let with = |extra: &[&'static str]| -> Vec<&'static str> {
        toy.iter().chain(extra).flat_map(|s| ["--set", s]).collect()
    };
    let mut files = BTreeMap::new();

    let mut train_args = vec!["train"];
    train_args.extend(with(&["model.attention=se", "stripe.enabled=true", "stripe.probes=4"]));
    let (run, _) = asr_bin(root, &train_args);
    collect(&mut files, "train", &run);
    let ckpt = run.join("model.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    let (fused, _) = asr_bin(root, &["fuse", ckpt_s]);
    collect(&mut files, "fuse", &fused);
    let (_, verify) = asr_bin(root, &["verify", ckpt_s, fused.join("fused.ckpt").to_str().unwrap()]);
    files.insert("verify/stdout".into(), verify.into_bytes());
    let (dir, _) = asr_bin(root, &["stripe", run.to_str().unwrap()]);
    collect(&mut files, "stripe", &dir);
    let (dir, _) = asr_bin(root, &["perturb", "--trials", "3", "--depth", "3", "--width", "6"]);
    collect(&mut files, "perturb", &dir);
    let model = format!("asr_se={ckpt_s}");
    let (dir, _) = asr_bin(root, &["noise", "--model", &model, "--spec", "const:0.5,0.5", "--spec", "rand:0.1,0.1"]);
    collect(&mut files, "noise", &dir);
    let mut ablate = vec!["ablate", "--axis", "delta"];
    ablate.extend(with(&["model.attention=ie", "train.epochs=1"]));
    let (dir, _) = asr_bin(root, &ablate);
    collect(&mut files, "ablate", &dir);
    let (dir, _) = asr_bin(root, &["bench", ckpt_s, "--iters", "1", "--warmup", "0"]);
    collect(&mut files, "bench", &dir);
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    check(
        differing.is_empty() && first.len() == second.len(),
        format!("{} artifacts over train, fuse, verify, stripe, perturb, noise, ablate, bench; differing {differing:?}", first.len()),
    )
}

fn bench_parity() -> Outcome {
    let input = [3, 16, 16];
    let att = AttentionConfig::new(AttentionKind::Se { reduction: 4 }, SlotMode::Asr { psi: PsiMode::default() });
    let asr = build_toy_resnet(2, 16, 10, &input, Some(&att)).unwrap();
    let asr_p = asr.init_params(1).unwrap();
    let fused = fuse_model(&asr, &asr_p).unwrap();
    let base = build_toy_resnet(2, 16, 10, &input, None).unwrap();
    let base_p = base.init_params(1).unwrap();
    let rows = bench_interleaved(
        &[("baseline", &base, &base_p), ("asr", &asr, &asr_p), ("asr_fused", &fused.graph, &fused.params)],
        32,
        10,
        200,
    )
    .unwrap();
    let (b, a, f) = (&rows[0], &rows[1], &rows[2]);
    let parity = f.params == b.params
        && f.macs == b.macs
        && count_flops_conv(&fused.graph, &input).unwrap() == count_flops_conv(&base, &input).unwrap();
    check(
        parity && f.throughput >= 0.98 * a.throughput && f.throughput >= 0.98 * b.throughput,
        format!(
            "params baseline {} asr {} fused {}; macs baseline {} fused {}; throughput baseline {:.0} asr {:.0} fused {:.0}",
            b.params, a.params, f.params, b.macs, f.macs, b.throughput, a.throughput, f.throughput
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("fold soundness", 60, fold_soundness),
        ("end-to-end fusion", 600, end_to_end_fusion),
        ("perturbation bound", 120, perturbation_bound),
        ("gradients", 120, gradients),
        ("spectral norm", 30, spectral_norm_oracle),
        ("stripe machinery", u64::MAX, stripe_machinery),
        ("noise harness", u64::MAX, noise_harness),
        ("determinism", u64::MAX, determinism),
        ("bench", u64::MAX, bench_parity),
    ];
    let mut failed = 0;
    for (i, (name, limit, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > Duration::from_secs(limit) => Err(format!("{d}; exceeded {limit}s budget")),
            other => other,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {} {name}: {status} {:.1}s {detail}", i + 1, took.as_secs_f64());
        failed += usize::from(outcome.is_err());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
