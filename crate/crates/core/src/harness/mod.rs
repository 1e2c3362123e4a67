//! Backbone pretraining and the class-incremental training loop.
//!
//! Each task extends the classifier by a zero-initialised block and trains
//! the prompts plus that block with cross-entropy over the task's own
//! classes. Evaluation takes a joint argmax over every seen column, with no
//! task identity.

mod audit;
mod classifier;
mod pretrain;
mod prompter;
mod run;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::MethodSpec;

pub use audit::AuditedData;
pub use classifier::{argmax, GrowingClassifier, HeadBlock};
pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainReport};
pub use prompter::{Handles, Prompter};
pub use run::{predict, run_cil, write_run_dir, CilRun, RunSummary};
pub use train::{evaluate, extract_features, train_task, TaskData, TaskLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Apt,
    AptNoPpf,
    AptInputLevel,
    VptShallow,
    VptDeep,
    Pool,
    LinearProbe,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Apt,
        Method::AptNoPpf,
        Method::AptInputLevel,
        Method::VptShallow,
        Method::VptDeep,
        Method::Pool,
        Method::LinearProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Apt => "apt",
            Method::AptNoPpf => "apt-no-ppf",
            Method::AptInputLevel => "apt-input-level",
            Method::VptShallow => "vpt-shallow",
            Method::VptDeep => "vpt-deep",
            Method::Pool => "pool",
            Method::LinearProbe => "linear-probe",
        }
    }

    /// Whether inference uses fused prompts.
    pub fn fuses(self) -> bool {
        matches!(self, Method::Apt | Method::AptInputLevel)
    }

    /// Cost-model shape of the method under `cfg`.
    pub fn cost_spec(self, cfg: &TrainConfig) -> MethodSpec {
        match self {
            Method::Apt | Method::AptNoPpf | Method::AptInputLevel => MethodSpec::apt(),
            Method::VptShallow => MethodSpec::vpt_shallow(cfg.vpt_tokens),
            Method::VptDeep => MethodSpec::vpt_deep(cfg.vpt_tokens),
            Method::Pool => MethodSpec::pool(cfg.pool_tokens * cfg.pool_top_k, cfg.pool_size),
            Method::LinearProbe => MethodSpec::plain(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s}")))
    }
}

/// Where task `t + 1` training starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarmStart {
    /// The fused set used for inference after task `t`.
    Fused,
    /// The un-fused prompts trained on task `t`.
    Trained,
    /// Zero prompts.
    Fresh,
}

impl FromStr for WarmStart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(WarmStart::Fused),
            "trained" => Ok(WarmStart::Trained),
            "fresh" => Ok(WarmStart::Fresh),
            other => Err(Error::Config(format!("unknown warm start {other}"))),
        }
    }
}

impl WarmStart {
    pub fn name(self) -> &'static str {
        match self {
            WarmStart::Fused => "fused",
            WarmStart::Trained => "trained",
            WarmStart::Fresh => "fresh",
        }
    }
}

/// Per-task optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt_lr: f64,
    pub head_lr: f64,
    pub alpha: f64,
    pub warm_start: WarmStart,
    pub vpt_tokens: usize,
    pub pool_size: usize,
    pub pool_tokens: usize,
    pub pool_top_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            prompt_lr: 3e-3,
            head_lr: 1e-2,
            alpha: 0.7,
            warm_start: WarmStart::Fused,
            vpt_tokens: 4,
            pool_size: 10,
            pool_tokens: 5,
            pool_top_k: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        let lrs_ok = [self.prompt_lr, self.head_lr].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !lrs_ok {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Deterministic 64-bit key for `(seed, a, b)`.
pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
