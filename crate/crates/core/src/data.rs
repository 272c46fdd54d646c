//! Labelled image sets: the CIFAR-10 binary format and a seeded synthetic set.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::PathBuf;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        samples: usize,
        size: usize,
        seed: u64,
        noise: f64,
    },
    Cifar10Bin {
        paths: Vec<PathBuf>,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                samples,
                size,
                seed,
                noise,
            } => synth_dataset(*classes, *samples, *size, *seed, *noise),
            DatasetSpec::Cifar10Bin { paths } => load_cifar10_bin(paths, CIFAR_MEAN, CIFAR_STD),
        }
    }
}

/// Images stored contiguously, one `sample_shape` block per label.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into a `[B, ...]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<&[f64]> = indices.iter().map(|&i| self.image(i)).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::stack(&images, &self.sample_shape)?, labels))
    }

    /// First `n` samples (all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            sample_shape: self.sample_shape.clone(),
            data: self.data[..n * self.sample_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }
}

/// Parses CIFAR-10 binary batches: each record is a label byte followed by
/// 32×32 R, G and B planes. Pixels are scaled to `[0, 1]` and normalized per channel.
pub fn load_cifar10_bin(paths: &[PathBuf], mean: [f64; 3], std: [f64; 3]) -> Result<Dataset> {
    let mut ds = Dataset {
        sample_shape: vec![3, 32, 32],
        data: Vec::new(),
        labels: Vec::new(),
        classes: 10,
    };
    for path in paths {
        let bytes = std::fs::read(path)?;
        parse_cifar(&bytes, mean, std, &mut ds)?;
    }
    Ok(ds)
}

fn parse_cifar(bytes: &[u8], mean: [f64; 3], std: [f64; 3], ds: &mut Dataset) -> Result<()> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            detail: format!("truncated record: {} trailing bytes", bytes.len() - whole),
        });
    }
    ds.data.reserve(whole / CIFAR_RECORD * 3072);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD) as u64,
                detail: format!("label {label} outside 0..=9"),
            });
        }
        ds.labels.push(label);
        for (c, plane) in rec[1..].chunks_exact(1024).enumerate() {
            ds.data
                .extend(plane.iter().map(|&p| (p as f64 / 255.0 - mean[c]) / std[c]));
        }
    }
    Ok(())
}

/// Seeded procedural images `[3, size, size]`. Class `k` draws a linear
/// intensity ramp oriented at angle `πk/classes` with a random per-sample
/// amplitude, plus a class-dependent offset per colour channel and Gaussian
/// pixel noise. Labels cycle through the classes in order.
pub fn synth_dataset(classes: usize, samples: usize, size: usize, seed: u64, noise: f64) -> Result<Dataset> {
    if classes == 0 || size == 0 {
        return Err(Error::Config("synthetic set needs positive classes and size".into()));
    }
    let gauss = Normal::new(0.0, noise).map_err(|e| Error::Config(format!("noise level {noise}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = (size as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(samples * 3 * size * size);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let k = i % classes;
        let angle = PI * k as f64 / classes as f64;
        let (s, c) = angle.sin_cos();
        let amplitude = rng.random_range(0.5..1.5);
        for ch in 0..3 {
            let offset = 0.5 * (2.0 * PI * (k as f64 / classes as f64) + ch as f64 * 2.0 * PI / 3.0).cos();
            for y in 0..size {
                for x in 0..size {
                    let proj = ((x as f64 - centre) * c + (y as f64 - centre) * s) / size as f64;
                    data.push(amplitude * proj + offset + gauss.sample(&mut rng));
                }
            }
        }
        labels.push(k);
    }
    Ok(Dataset {
        sample_shape: vec![3, size, size],
        data,
        labels,
        classes,
    })
}
