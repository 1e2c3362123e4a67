use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{Injection, ViTConfig, ViTModel};

/// Key-matched prompt pool. Keys are fixed unit vectors; each entry owns an
/// `[n, d]` token block.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    keys: Tensor,
    prompts: Tensor,
    n_tokens: usize,
    top_k: usize,
}

impl PromptPool {
    pub fn new(
        config: &ViTConfig,
        size: usize,
        n_tokens: usize,
        top_k: usize,
        seed: u64,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("prompt pool is empty".into()));
        }
        if n_tokens == 0 || top_k == 0 || top_k > size {
            return Err(Error::Config(format!(
                "pool needs 0 < top_k <= size and n > 0 (size {size}, top_k {top_k}, n {n_tokens})"
            )));
        }
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = Tensor::randn(&[size, d], 1.0, &mut rng);
        let prompts = Tensor::randn(&[size * n_tokens, d], 0.02, &mut rng).trainable();
        Self::with_keys(keys, prompts, n_tokens, top_k)
    }

    /// Pool over explicit keys `[P, d]` (normalised here) and prompts `[P·n, d]`.
    pub fn with_keys(mut keys: Tensor, prompts: Tensor, n_tokens: usize, top_k: usize) -> Result<Self> {
        let s = keys.shape().to_vec();
        if s.len() != 2 || prompts.shape() != [s[0] * n_tokens, s[1]] {
            return Err(Error::shape("prompt pool", &s, prompts.shape()));
        }
        if top_k == 0 || top_k > s[0] {
            return Err(Error::Config(format!("top_k {top_k} outside 1..={}", s[0])));
        }
        for row in keys.data_mut().chunks_mut(s[1]) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Config("pool key of zero length".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        keys.set_requires_grad(false);
        Ok(Self {
            keys,
            prompts: prompts.trainable(),
            n_tokens,
            top_k,
        })
    }

    pub fn size(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn prompts(&self) -> &Tensor {
        &self.prompts
    }

    /// Trainable prompt values only; keys are fixed.
    pub fn param_count(&self) -> usize {
        self.prompts.numel()
    }

    pub fn key_count(&self) -> usize {
        self.keys.numel()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.prompts]
    }

    /// Pool entries with the `top_k` highest cosine similarity to each query
    /// row, best first; ties go to the lower index.
    pub fn select(&self, queries: &Tensor) -> Result<Vec<Vec<usize>>> {
        let d = self.keys.shape()[1];
        if queries.shape().len() != 2 || queries.shape()[1] != d {
            return Err(Error::shape("pool_select", queries.shape(), self.keys.shape()));
        }
        Ok(queries
            .data()
            .chunks(d)
            .map(|q| {
                let sims: Vec<f64> = self.keys.data().chunks(d).map(|k| cosine(q, k)).collect();
                let mut order: Vec<usize> = (0..sims.len()).collect();
                order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
                order.truncate(self.top_k);
                order
            })
            .collect())
    }

    /// Per-image token blocks `[b, top_k·n, d]` for the chosen entries.
    pub fn injection(&self, tape: &mut Tape, selection: &[Vec<usize>]) -> Result<(Injection, Var)> {
        let n = self.n_tokens;
        let rows: Vec<usize> = selection
            .iter()
            .flat_map(|sel| sel.iter().flat_map(move |&e| e * n..(e + 1) * n))
            .collect();
        let pv = tape.leaf(&self.prompts);
        let gathered = tape.gather_rows(pv, &rows)?;
        let d = self.keys.shape()[1];
        let block = tape.reshape(gathered, &[selection.len(), self.top_k * n, d])?;
        Ok((
            Injection::Prepend {
                tokens: vec![block],
                deep: false,
            },
            pv,
        ))
    }

    pub fn collect_grads(&mut self, tape: &Tape, var: Var) -> Result<()> {
        tape.accumulate_into(var, &mut self.prompts)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Queries each image with the plain backbone's CLS feature and returns the
/// selected pool entries.
pub fn pool_select(model: &ViTModel, images: &[&[f64]], pool: &PromptPool) -> Result<Vec<Vec<usize>>> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let trace = model.features(&mut tape, &vars, images, &Injection::None)?;
    pool.select(&tape.to_tensor(trace.cls))
}
