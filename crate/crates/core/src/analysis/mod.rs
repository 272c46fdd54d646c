//! Diagnostics over trained models.

pub mod bench;
pub mod freeze;
pub mod noise;
pub mod perturb;
pub mod stripe;

pub use bench::{bench, bench_interleaved, BenchRow};
pub use freeze::{freeze_attention_eval, FreezeResult};
pub use noise::{noise_attack_eval, noise_attack_repeated, NoiseSpec, NoiseSummary};
pub use perturb::{perturb_trace, PerturbationRow, PerturbationTrace};
pub use stripe::{StripeRecord, StripeRecorder};
