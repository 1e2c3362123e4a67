use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{Injection, ViTConfig};

/// Token-insertion prompting flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConcatMode {
    /// One token block inserted before the first layer.
    Shallow,
    /// A fresh token block at every layer.
    Deep,
}

/// Learnable prompt tokens placed after CLS.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatPromptSet {
    mode: ConcatMode,
    tokens: Vec<Tensor>,
}

impl ConcatPromptSet {
    pub fn new(config: &ViTConfig, mode: ConcatMode, n_tokens: usize, seed: u64) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        let blocks = match mode {
            ConcatMode::Shallow => 1,
            ConcatMode::Deep => config.depth,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..blocks)
            .map(|_| Tensor::randn(&[n_tokens, config.dim], 0.02, &mut rng).trainable())
            .collect();
        Ok(Self { mode, tokens })
    }

    pub fn mode(&self) -> ConcatMode {
        self.mode
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens[0].shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.tokens.iter().map(Tensor::numel).sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.tokens.iter_mut().collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.tokens.iter().collect()
    }

    pub fn injection(&self, tape: &mut Tape) -> (Injection, Vec<Var>) {
        let vars: Vec<Var> = self.tokens.iter().map(|t| tape.leaf(t)).collect();
        let inj = Injection::Prepend {
            tokens: vars.clone(),
            deep: self.mode == ConcatMode::Deep,
        };
        (inj, vars)
    }

    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (t, v) in self.tokens.iter_mut().zip(vars) {
            tape.accumulate_into(*v, t)?;
        }
        Ok(())
    }
}
