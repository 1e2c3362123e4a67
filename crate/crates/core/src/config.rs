//! Flat run configuration read from `key = value` text.
//!
//! Blank lines and `#` comments are ignored, unknown keys are errors, and
//! later assignments win. The same `set` path serves command-line overrides.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::harness::{Method, PretrainConfig, TrainConfig, WarmStart};
use crate::vit::ViTConfig;

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr),* $(,)?) => {
        /// Every tunable of a pipeline run.
        #[derive(Debug, Clone, PartialEq, Serialize)]
        pub struct RunConfig {
            $(pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Assigns one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($key) => {
                        self.$key = parse_value(stringify!($key), value)?;
                    })*
                    other => return Err(Error::Config(format!("unknown config key {other}"))),
                }
                Ok(())
            }

            /// Keys and their current values, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), show(&self.$key)),)*]
            }
        }
    };
}

run_config! {
    image_size: usize = 32,
    channels: usize = 1,
    patch_size: usize = 8,
    depth: usize = 4,
    dim: usize = 64,
    heads: usize = 4,
    mlp_ratio: usize = 4,

    pretrain_classes: usize = 40,
    cil_classes: usize = 40,
    train_per_class: usize = 100,
    test_per_class: usize = 50,
    noise_sigma: f64 = 0.25,
    max_shift: usize = 2,
    data_seed: u64 = 0,

    pretrain_epochs: usize = PretrainConfig::default().epochs,
    pretrain_batch_size: usize = PretrainConfig::default().batch_size,
    pretrain_lr: f64 = PretrainConfig::default().lr,
    pretrain_seed: u64 = 0,

    method: Method = Method::Apt,
    tasks: usize = 5,
    alpha: f64 = TrainConfig::default().alpha,
    epochs: usize = TrainConfig::default().epochs,
    batch_size: usize = TrainConfig::default().batch_size,
    prompt_lr: f64 = TrainConfig::default().prompt_lr,
    head_lr: f64 = TrainConfig::default().head_lr,
    warm_start: WarmStart = WarmStart::Fused,
    vpt_tokens: usize = TrainConfig::default().vpt_tokens,
    pool_size: usize = TrainConfig::default().pool_size,
    pool_tokens: usize = TrainConfig::default().pool_tokens,
    pool_top_k: usize = TrainConfig::default().pool_top_k,
    seed: u64 = 0,
}

trait ConfigValue: Sized {
    fn parse_text(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_text(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, Method);

impl ConfigValue for WarmStart {
    fn parse_text(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        self.name().to_string()
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_text(value).ok_or_else(|| Error::Config(format!("bad value {value:?} for {key}")))
}

fn show<T: ConfigValue>(v: &T) -> String {
    v.show()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text that [`RunConfig::parse`] reads back to the same value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config fields serialise")
    }

    pub fn vit(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Generator settings for the pretraining universe.
    pub fn pretrain_spec(&self) -> SynthSpec {
        self.synth(self.pretrain_classes, 0)
    }

    /// Generator settings for the incremental universe, whose class ids
    /// follow the pretraining ones.
    pub fn cil_spec(&self) -> SynthSpec {
        self.synth(self.cil_classes, self.pretrain_classes)
    }

    fn synth(&self, n_classes: usize, class_offset: usize) -> SynthSpec {
        SynthSpec {
            n_classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            image_size: self.image_size,
            channels: self.channels,
            noise_sigma: self.noise_sigma,
            max_shift: self.max_shift,
            seed: self.data_seed,
            class_offset,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            lr: self.pretrain_lr,
            seed: self.pretrain_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            prompt_lr: self.prompt_lr,
            head_lr: self.head_lr,
            alpha: self.alpha,
            warm_start: self.warm_start,
            vpt_tokens: self.vpt_tokens,
            pool_size: self.pool_size,
            pool_tokens: self.pool_tokens,
            pool_top_k: self.pool_top_k,
            seed: self.seed,
        }
    }

    /// Checks everything that can be rejected before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.vit().validate()?;
        self.train().validate()?;
        self.pretrain_spec().validate()?;
        self.cil_spec().validate()?;
        if self.tasks == 0 || !self.cil_classes.is_multiple_of(self.tasks) {
            return Err(Error::Config(format!(
                "{} incremental classes do not split into {} tasks",
                self.cil_classes, self.tasks
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("method", "vpt-deep").unwrap();
        cfg.set("alpha", "0.25").unwrap();
        cfg.set("warm_start", "fresh").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\nepochs = 3  # short\n tasks=4\n").unwrap();
        assert_eq!((cfg.epochs, cfg.tasks), (3, 4));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::parse("epoch = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("epochs = three"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("epochs 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("method = l2p"), Err(Error::Config(_))));
    }

    #[test]
    fn validation_catches_alpha_and_task_split() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.alpha = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.alpha = 0.7;
        cfg.tasks = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn every_key_is_listed() {
        let cfg = RunConfig::default();
        let keys: Vec<_> = cfg.entries().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, RunConfig::KEYS);
        assert_eq!(cfg.to_json().as_object().unwrap().len(), keys.len());
    }
}
