//! Run configuration: an INI file with `[model]`, `[data]`, `[train]` and
//! `[stripe]` sections. Every key has a default, unknown keys are rejected,
//! and `section.key=value` overrides are applied on top of the file.

use crate::error::{CliError, Result};
use asr_core::attention::{AttentionKind, PsiMode, SlotMode};
use asr_core::backbones::AttentionConfig;
use asr_core::data::DatasetSpec;
use asr_core::optim::Schedule;
use asr_core::train::{Arch, TrainConfig};
use asr_core::PositionTag;
use ini::Ini;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

/// `(section, key, default)`, in echo order.
const SCHEMA: &[(&str, &str, &str)] = &[
    ("model", "arch", "resnet"),
    ("model", "blocks", "3"),
    ("model", "stages", "3"),
    ("model", "width", "16"),
    ("model", "attention", "none"),
    ("model", "mode", "asr"),
    ("model", "psi", "learnable"),
    ("model", "psi_value", "0.1"),
    ("model", "psi_std", "0.1"),
    ("model", "psi_seed", "0"),
    ("model", "position", "after_last_bn"),
    ("model", "delta", "1"),
    ("model", "reduction", "4"),
    ("model", "eca_kernel", "3"),
    ("model", "spa_levels", "1,2,4"),
    ("data", "source", "synthetic"),
    ("data", "classes", "10"),
    ("data", "samples", "256"),
    ("data", "size", "32"),
    ("data", "seed", "0"),
    ("data", "noise", "0.5"),
    ("data", "paths", ""),
    ("data", "eval_samples", "256"),
    ("data", "eval_seed", "1"),
    ("data", "eval_paths", ""),
    ("train", "epochs", "5"),
    ("train", "batch_size", "32"),
    ("train", "lr", "0.1"),
    ("train", "momentum", "0.9"),
    ("train", "weight_decay", "0.0005"),
    ("train", "schedule", "constant"),
    ("train", "milestones", ""),
    ("train", "gamma", "0.1"),
    ("train", "seed", "0"),
    ("train", "top_k", "5"),
    ("train", "augment_flip", "false"),
    ("train", "augment_crop", "false"),
    ("stripe", "enabled", "false"),
    ("stripe", "probes", "16"),
    ("stripe", "probe_seed", "7"),
    ("stripe", "threshold", "0.001"),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StripeSettings {
    pub enabled: bool,
    pub probes: usize,
    pub probe_seed: u64,
    pub threshold: f64,
}

/// The fully resolved key set. Typed views are rebuilt (and validated) on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<(String, String), String>,
}

fn bad(key: &str, detail: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {detail}"))
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: SCHEMA
                .iter()
                .map(|(s, k, v)| ((s.to_string(), k.to_string()), v.to_string()))
                .collect(),
        }
    }

    /// Defaults, then `text`, then `overrides` (each `section.key=value`).
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config(format!("config syntax: {e}")))?;
        let mut cfg = RunConfig::defaults();
        let mut seen = std::collections::BTreeSet::new();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let Some(section) = section else {
                    return Err(bad(key, "keys must sit inside a [section]"));
                };
                let name = format!("{section}.{key}");
                if !seen.insert(name.clone()) {
                    return Err(bad(&name, "given more than once"));
                }
                cfg.set(&name, value)?;
            }
        }
        for o in overrides {
            let (name, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {o:?} is not section.key=value")))?;
            cfg.set(name.trim(), value.trim())?;
        }
        cfg.train_config()?;
        cfg.stripe()?;
        Ok(cfg)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let (section, key) = name
            .split_once('.')
            .ok_or_else(|| bad(name, "expected section.key"))?;
        let slot = self
            .values
            .get_mut(&(section.to_string(), key.to_string()))
            .ok_or_else(|| bad(name, "unknown key"))?;
        *slot = value.to_string();
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        let (s, k) = name.split_once('.').expect("schema names are dotted");
        &self.values[&(s.to_string(), k.to_string())]
    }

    fn parsed<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(name);
        raw.parse().map_err(|e| bad(name, format!("cannot parse {raw:?}: {e}")))
    }

    fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(name)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| bad(name, format!("cannot parse {s:?}: {e}"))))
            .collect()
    }

    /// The resolved configuration as an INI document; parsing it yields `self`.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, _) in SCHEMA {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {}\n", self.values[&(section.to_string(), key.to_string())]));
        }
        out
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("train.seed")
    }

    pub fn attention(&self) -> Result<Option<AttentionConfig>> {
        let reduction = || self.parsed::<usize>("model.reduction");
        let kind = match self.get("model.attention") {
            "none" => return Ok(None),
            "se" => AttentionKind::Se { reduction: reduction()? },
            "ie" => AttentionKind::Ie,
            "srm" => AttentionKind::Srm,
            "spa" => AttentionKind::Spa {
                levels: self.list("model.spa_levels")?,
                reduction: reduction()?,
            },
            "eca" => AttentionKind::Eca {
                kernel: self.parsed("model.eca_kernel")?,
            },
            "cbam" => AttentionKind::CbamChannel { reduction: reduction()? },
            other => return Err(bad("model.attention", format!("unknown attention {other:?}"))),
        };
        let psi = match self.get("model.psi") {
            "learnable" => PsiMode::Learnable {
                init: self.parsed("model.psi_value")?,
            },
            "constant" => PsiMode::FrozenConstant {
                value: self.parsed("model.psi_value")?,
            },
            "gaussian" => PsiMode::FrozenGaussian {
                std: self.parsed("model.psi_std")?,
                seed: self.parsed("model.psi_seed")?,
            },
            other => return Err(bad("model.psi", format!("unknown psi mode {other:?}"))),
        };
        let mode = match self.get("model.mode") {
            "standard" => SlotMode::Standard,
            "asr" => SlotMode::Asr { psi },
            "no_body" => SlotMode::NoBody { psi },
            other => return Err(bad("model.mode", format!("unknown slot mode {other:?}"))),
        };
        let delta: usize = self.parsed("model.delta")?;
        if delta == 0 {
            return Err(bad("model.delta", "must be at least 1"));
        }
        let position: PositionTag = self
            .get("model.position")
            .parse()
            .map_err(|e| bad("model.position", e))?;
        Ok(Some(AttentionConfig::new(kind, mode).at(position).stacked(delta)))
    }

    fn data_spec(&self, eval: bool) -> Result<Option<DatasetSpec>> {
        match self.get("data.source") {
            "synthetic" => {
                let samples: usize = self.parsed(if eval { "data.eval_samples" } else { "data.samples" })?;
                if eval && samples == 0 {
                    return Ok(None);
                }
                Ok(Some(DatasetSpec::Synthetic {
                    classes: self.parsed("data.classes")?,
                    samples,
                    size: self.parsed("data.size")?,
                    seed: self.parsed(if eval { "data.eval_seed" } else { "data.seed" })?,
                    noise: self.parsed("data.noise")?,
                }))
            }
            "cifar10" => {
                let key = if eval { "data.eval_paths" } else { "data.paths" };
                let paths: Vec<PathBuf> = self.list(key)?;
                match (paths.is_empty(), eval) {
                    (true, true) => Ok(None),
                    (true, false) => Err(bad(key, "cifar10 needs at least one batch file")),
                    _ => Ok(Some(DatasetSpec::Cifar10Bin { paths })),
                }
            }
            other => Err(bad("data.source", format!("unknown source {other:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let width = self.parsed("model.width")?;
        let arch = match self.get("model.arch") {
            "resnet" => Arch::Resnet {
                blocks: self.parsed("model.blocks")?,
                width,
            },
            "vgg" => Arch::Vgg {
                stages: self.parsed("model.stages")?,
                width,
            },
            other => return Err(bad("model.arch", format!("unknown arch {other:?}"))),
        };
        let epochs = self.parsed("train.epochs")?;
        let schedule = match self.get("train.schedule") {
            "constant" => Schedule::Constant,
            "step" => Schedule::Step {
                milestones: self.list("train.milestones")?,
                gamma: self.parsed("train.gamma")?,
            },
            "cosine" => Schedule::Cosine { epochs },
            other => return Err(bad("train.schedule", format!("unknown schedule {other:?}"))),
        };
        let config = TrainConfig {
            arch,
            attention: self.attention()?,
            data: self.data_spec(false)?.expect("training data is always present"),
            eval_data: self.data_spec(true)?,
            epochs,
            batch_size: self.parsed("train.batch_size")?,
            lr: self.parsed("train.lr")?,
            momentum: self.parsed("train.momentum")?,
            weight_decay: self.parsed("train.weight_decay")?,
            schedule,
            seed: self.seed()?,
            top_k: self.parsed("train.top_k")?,
            augment_flip: self.parsed("train.augment_flip")?,
            augment_crop: self.parsed("train.augment_crop")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn stripe(&self) -> Result<StripeSettings> {
        let s = StripeSettings {
            enabled: self.parsed("stripe.enabled")?,
            probes: self.parsed("stripe.probes")?,
            probe_seed: self.parsed("stripe.probe_seed")?,
            threshold: self.parsed("stripe.threshold")?,
        };
        if s.enabled && s.probes < 2 {
            return Err(bad("stripe.probes", "stripe statistics need at least two probes"));
        }
        Ok(s)
    }
}
