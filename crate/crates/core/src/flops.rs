//! Analytic cost model and trainable-parameter accounting.
//!
//! Costs are multiply-accumulates over the transformer blocks only; one MAC
//! is reported as one "FLOP". Per block with `N` tokens:
//! `4·N·d²` for the four projections, `2·N²·d` for scores and weighted
//! values, `2·r·N·d²` for the MLP.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::ViTConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodKind {
    Plain,
    Apt,
    VptShallow,
    VptDeep,
    Pool,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Plain => "plain",
            MethodKind::Apt => "apt",
            MethodKind::VptShallow => "vpt-shallow",
            MethodKind::VptDeep => "vpt-deep",
            MethodKind::Pool => "pool",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "plain" => MethodKind::Plain,
            "apt" => MethodKind::Apt,
            "vpt-shallow" => MethodKind::VptShallow,
            "vpt-deep" => MethodKind::VptDeep,
            "pool" => MethodKind::Pool,
            other => return Err(Error::Config(format!("unknown cost-model method {other}"))),
        })
    }
}

/// Cost-relevant shape of a prompting method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Tokens inserted per prompted layer (concat and pool kinds).
    pub n: usize,
    /// Extra plain forward to compute the pool query.
    pub query_pass: bool,
    /// Pool entries, for parameter counting.
    pub pool_size: Option<usize>,
}

impl MethodSpec {
    pub fn plain() -> Self {
        Self { kind: MethodKind::Plain, n: 0, query_pass: false, pool_size: None }
    }

    pub fn apt() -> Self {
        Self { kind: MethodKind::Apt, n: 0, query_pass: false, pool_size: None }
    }

    pub fn vpt_shallow(n: usize) -> Self {
        Self { kind: MethodKind::VptShallow, n, query_pass: false, pool_size: None }
    }

    pub fn vpt_deep(n: usize) -> Self {
        Self { kind: MethodKind::VptDeep, n, query_pass: false, pool_size: None }
    }

    /// `n` is the total number of tokens inserted per image.
    pub fn pool(n: usize, pool_size: usize) -> Self {
        Self { kind: MethodKind::Pool, n, query_pass: true, pool_size: Some(pool_size) }
    }

    /// Default specs: vpt n = 4, pool 10 tokens from a pool of 10.
    pub fn default_for(kind: MethodKind) -> Self {
        match kind {
            MethodKind::Plain => Self::plain(),
            MethodKind::Apt => Self::apt(),
            MethodKind::VptShallow => Self::vpt_shallow(4),
            MethodKind::VptDeep => Self::vpt_deep(4),
            MethodKind::Pool => Self::pool(10, 10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MethodKind::Plain | MethodKind::Apt if self.n != 0 || self.query_pass => {
                Err(Error::Config(format!("{} takes no prompt tokens or query pass", self.kind)))
            }
            MethodKind::VptShallow | MethodKind::VptDeep if self.n == 0 || self.query_pass => {
                Err(Error::Config(format!("{} needs n > 0 and no query pass", self.kind)))
            }
            MethodKind::Pool if !self.query_pass || self.n == 0 => {
                Err(Error::Config("pool needs n > 0 and a query pass".into()))
            }
            _ => Ok(()),
        }
    }

    /// Tokens entering block `layer` beyond `m + 1`.
    pub fn extra_tokens(&self, _layer: usize) -> usize {
        match self.kind {
            MethodKind::Plain | MethodKind::Apt => 0,
            // Shallow tokens persist through every block once inserted.
            MethodKind::VptShallow | MethodKind::VptDeep | MethodKind::Pool => self.n,
        }
    }
}

/// MAC breakdown of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub qkv_proj: u64,
    pub attn_scores: u64,
    pub attn_values: u64,
    pub out_proj: u64,
    pub mlp: u64,
    pub query_pass: u64,
    /// Elementwise prompt additions, excluded from the headline.
    pub prompt_adds: u64,
    pub total_macs: u64,
    pub ratio_to_plain: f64,
}

impl FlopsReport {
    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    /// Headline figure; one MAC counts as one FLOP.
    pub fn gflops(&self) -> f64 {
        self.gmacs()
    }
}

/// MACs of the blocks of a single forward pass under `method`.
fn block_macs(config: &ViTConfig, method: &MethodSpec) -> [u64; 5] {
    let d = config.dim as u64;
    let r = config.mlp_ratio as u64;
    let mut acc = [0u64; 5];
    for layer in 0..config.depth {
        let n = (config.seq_len() + method.extra_tokens(layer)) as u64;
        acc[0] += 3 * n * d * d;
        acc[1] += n * n * d;
        acc[2] += n * n * d;
        acc[3] += n * d * d;
        acc[4] += 2 * r * n * d * d;
    }
    acc
}

pub fn flops_forward(config: &ViTConfig, method: &MethodSpec) -> Result<FlopsReport> {
    config.validate()?;
    method.validate()?;
    let [qkv, scores, values, out, mlp] = block_macs(config, method);
    let plain: u64 = block_macs(config, &MethodSpec::plain()).iter().sum();
    let query = if method.query_pass { plain } else { 0 };
    let total = qkv + scores + values + out + mlp + query;
    let prompt_adds = match method.kind {
        MethodKind::Apt => 2 * (config.dim * config.depth) as u64,
        _ => 0,
    };
    Ok(FlopsReport {
        qkv_proj: qkv,
        attn_scores: scores,
        attn_values: values,
        out_proj: out,
        mlp,
        query_pass: query,
        prompt_adds,
        total_macs: total,
        ratio_to_plain: total as f64 / plain as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    /// Prompt values only; classifier excluded.
    pub prompt_params: usize,
    /// Pool keys, counted apart from the prompts.
    pub key_params: usize,
}

pub fn count_trainable_params(method: &MethodSpec, config: &ViTConfig) -> Result<ParamReport> {
    let (l, d, n) = (config.depth, config.dim, method.n);
    let prompt_params = match method.kind {
        MethodKind::Plain => 0,
        MethodKind::Apt => 2 * l * d,
        MethodKind::VptShallow => n * d,
        MethodKind::VptDeep => l * n * d,
        MethodKind::Pool => {
            let p = method
                .pool_size
                .ok_or_else(|| Error::Config("pool parameter count needs a pool size".into()))?;
            return Ok(ParamReport { prompt_params: p * n * d, key_params: p * d });
        }
    };
    Ok(ParamReport { prompt_params, key_params: 0 })
}

/// `method,gmacs,ratio,trainable_prompt_params` table; ratios relative to plain.
pub fn flops_csv(config: &ViTConfig, methods: &[MethodSpec]) -> Result<String> {
    let mut out = String::from("method,gmacs,ratio,trainable_prompt_params\n");
    for m in methods {
        let f = flops_forward(config, m)?;
        let p = count_trainable_params(m, config)?;
        writeln!(out, "{},{:.4},{:.4},{}", m.kind, f.gmacs(), f.ratio_to_plain, p.prompt_params).unwrap();
    }
    Ok(out)
}
