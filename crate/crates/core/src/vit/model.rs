use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ViTConfig;
use crate::error::{Error, Result};
use crate::io::{load_tensors, save_tensors, take_named};
use crate::tensor::{CostScope, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
/// Pixels are standardised with these constants before patch projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;
/// Unit-scale positional embeddings; much smaller values leave training on a
/// long plateau because tokens carry too little location signal.
const POS_INIT_STD: f64 = 1.0;

/// Parameters of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl Block {
    fn init(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, hd) = (cfg.dim, cfg.hidden_dim());
        let lin = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
        };
        Self {
            ln1_g: Tensor::full(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            wq: lin(d, d, rng),
            bq: Tensor::zeros(&[d]),
            wk: lin(d, d, rng),
            bk: Tensor::zeros(&[d]),
            wv: lin(d, d, rng),
            bv: Tensor::zeros(&[d]),
            wo: lin(d, d, rng),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            w1: lin(d, hd, rng),
            b1: Tensor::zeros(&[hd]),
            w2: lin(hd, d, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Handles of the model parameters on a tape, in canonical order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<[Var; 16]>,
    pub norm_g: Var,
    pub norm_b: Var,
}

impl ModelVars {
    /// Every handle, in the same order as [`ViTModel::params_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.patch_w, self.patch_b, self.cls, self.pos];
        for b in &self.blocks {
            v.extend_from_slice(b);
        }
        v.push(self.norm_g);
        v.push(self.norm_b);
        v
    }
}

/// How prompts enter a forward pass.
#[derive(Debug, Clone)]
pub enum Injection {
    /// Plain backbone.
    None,
    /// Per layer `(p_k, p_v)`, each `[d]`, added to the CLS key and value.
    KeyValue(Vec<(Var, Var)>),
    /// Per layer `[d]` vector added to the CLS row of the block input.
    InputLevel(Vec<Var>),
    /// Prompt tokens placed right after CLS. Each entry is `[n, d]` (shared
    /// by the batch) or `[b, n, d]` (per image). Shallow mode passes one
    /// entry, used at the first block; deep mode passes one per block and
    /// replaces the previous block's prompt outputs.
    Prepend { tokens: Vec<Var>, deep: bool },
}

/// What a forward pass leaves behind besides the feature.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Final-normed CLS embedding, `[b, d]`.
    pub cls: Var,
    /// Attention probabilities per block, `[b·h, n, n]`.
    pub attention: Vec<Var>,
    /// Token count entering each block.
    pub seq_lens: Vec<usize>,
}

/// Pre-norm vision transformer with learned positional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    config: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    frozen: bool,
}

impl ViTModel {
    /// Randomly initialised, trainable model.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let patch_w = Tensor::randn(
            &[config.patch_dim(), d],
            (1.0 / config.patch_dim() as f64).sqrt(),
            &mut rng,
        );
        let cls = Tensor::randn(&[d], 0.02, &mut rng);
        let pos = Tensor::randn(&[config.seq_len(), d], POS_INIT_STD, &mut rng);
        let blocks = (0..config.depth).map(|_| Block::init(&config, &mut rng)).collect();
        let mut model = Self {
            config,
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls,
            pos,
            blocks,
            norm_g: Tensor::full(&[d], 1.0),
            norm_b: Tensor::zeros(&[d]),
            frozen: false,
        };
        model.set_trainable(true);
        Ok(model)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezes every parameter and rounds it to storage precision, so the
    /// in-memory model and its weight file agree bit for bit.
    pub fn freeze(&mut self) {
        for t in self.params_mut() {
            t.round_to_f32();
        }
        self.set_trainable(false);
        self.frozen = true;
    }

    fn set_trainable(&mut self, on: bool) {
        for t in self.params_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Canonical parameter names, matching [`ViTModel::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["patch.w".into(), "patch.b".into(), "cls".into(), "pos".into()];
        for l in 0..self.blocks.len() {
            names.extend(BLOCK_FIELDS.iter().map(|f| format!("block.{l}.{f}")));
        }
        names.push("norm.g".into());
        names.push("norm.b".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.push(&self.norm_g);
        v.push(&self.norm_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.norm_g);
        v.push(&mut self.norm_b);
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Every parameter bitwise equal to `other`'s.
    pub fn bits_eq(&self, other: &ViTModel) -> bool {
        self.config == other.config
            && self.params().iter().zip(other.params()).all(|(a, b)| a.bits_eq(b))
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.tensors().map(|t| tape.leaf(t)))
            .collect();
        ModelVars {
            patch_w: tape.leaf(&self.patch_w),
            patch_b: tape.leaf(&self.patch_b),
            cls: tape.leaf(&self.cls),
            pos: tape.leaf(&self.pos),
            blocks,
            norm_g: tape.leaf(&self.norm_g),
            norm_b: tape.leaf(&self.norm_b),
        }
    }

    /// Cuts images into flattened patches, `[b, m, c·p·p]`, ordered by grid
    /// row then column; each patch vector is channel-major and standardised
    /// with [`PIXEL_MEAN`] and [`PIXEL_STD`].
    pub fn patchify(&self, images: &[&[f64]]) -> Result<Tensor> {
        let c = &self.config;
        let (s, p, g) = (c.image_size, c.patch_size, c.grid());
        let pd = c.patch_dim();
        let mut out = Vec::with_capacity(images.len() * c.n_patches() * pd);
        for img in images {
            if img.len() != c.pixels() {
                return Err(Error::shape("patchify", &[img.len()], &[c.channels, s, s]));
            }
            for gy in 0..g {
                for gx in 0..g {
                    for ch in 0..c.channels {
                        for py in 0..p {
                            let row = ch * s * s + (gy * p + py) * s + gx * p;
                            out.extend(img[row..row + p].iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![images.len(), c.n_patches(), pd], out)
    }

    /// Token sequence `[b, m+1, d]`: CLS then projected patches, plus
    /// positional embeddings.
    pub fn patch_embed(&self, tape: &mut Tape, vars: &ModelVars, images: &[&[f64]]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Contract("empty image batch".into()));
        }
        tape.set_scope(CostScope::Embed);
        let patches = self.patchify(images)?;
        let pv = tape.leaf(&patches);
        let proj = tape.matmul(pv, vars.patch_w)?;
        let proj = tape.add_broadcast(proj, vars.patch_b)?;
        let cls = tape.reshape(vars.cls, &[1, self.config.dim])?;
        let cls = tape.expand(cls, images.len());
        let seq = tape.concat_rows(cls, proj)?;
        let out = tape.add_broadcast(seq, vars.pos)?;
        tape.set_scope(CostScope::Block);
        Ok(out)
    }

    /// One pre-norm block on `x: [b, n, d]`. With `kv_delta = (p_k, p_v)` the
    /// CLS row of K and V is shifted in full `d`-dimensional space before the
    /// head split. Returns the block output and its attention probabilities.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        layer: usize,
        kv_delta: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        self.block(tape, vars, x, layer, kv_delta, false)
    }

    /// With `cls_only` the queries, MLP and output cover the CLS row alone,
    /// which is all a final block has to produce.
    fn block(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        layer: usize,
        kv_delta: Option<(Var, Var)>,
        cls_only: bool,
    ) -> Result<(Var, Var)> {
        let Some(bv) = vars.blocks.get(layer) else {
            return Err(Error::Contract(format!(
                "layer {layer} out of range for depth {}",
                self.config.depth
            )));
        };
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv_, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *bv;
        let heads = self.config.heads;
        tape.set_scope(CostScope::Block);

        let h = tape.layernorm(x, ln1_g, ln1_b, LN_EPS)?;
        let (x, hq) = if cls_only {
            (tape.slice_rows(x, 0, 1)?, tape.slice_rows(h, 0, 1)?)
        } else {
            (x, h)
        };
        let q = tape.matmul(hq, wq)?;
        let q = tape.add_broadcast(q, bq)?;
        let k = tape.matmul(h, wk)?;
        let mut k = tape.add_broadcast(k, bk)?;
        let v = tape.matmul(h, wv)?;
        let mut v = tape.add_broadcast(v, bv_)?;
        if let Some((pk, pv)) = kv_delta {
            k = tape.add_to_row(k, 0, pk)?;
            v = tape.add_to_row(v, 0, pv)?;
        }
        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(v, heads)?;
        let scores = tape.bmm(qh, kh, true)?;
        let scores = tape.scale(scores, 1.0 / (self.config.head_dim() as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.bmm(attn, vh, false)?;
        let ctx = tape.merge_heads(ctx, heads)?;
        let o = tape.matmul(ctx, wo)?;
        let o = tape.add_broadcast(o, bo)?;
        let x = tape.add(x, o)?;

        let h = tape.layernorm(x, ln2_g, ln2_b, LN_EPS)?;
        let m = tape.matmul(h, w1)?;
        let m = tape.add_broadcast(m, b1)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, w2)?;
        let m = tape.add_broadcast(m, b2)?;
        let out = tape.add(x, m)?;
        Ok((out, attn))
    }

    /// Full forward pass returning the final CLS feature `f(x)` per image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        images: &[&[f64]],
        injection: &Injection,
    ) -> Result<ForwardTrace> {
        self.forward_impl(tape, vars, images, injection, false)
    }

    /// Same features as [`ViTModel::forward`], bit for bit, but the last
    /// block only processes the CLS row. Its attention entry is the CLS
    /// query row alone, `[b·h, 1, n]`.
    pub fn features(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        images: &[&[f64]],
        injection: &Injection,
    ) -> Result<ForwardTrace> {
        self.forward_impl(tape, vars, images, injection, true)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        images: &[&[f64]],
        injection: &Injection,
        trim_last: bool,
    ) -> Result<ForwardTrace> {
        let depth = self.config.depth;
        match injection {
            Injection::KeyValue(p) if p.len() != depth => {
                return Err(Error::Contract(format!("{} prompt layers for depth {depth}", p.len())))
            }
            Injection::InputLevel(p) if p.len() != depth => {
                return Err(Error::Contract(format!("{} prompt layers for depth {depth}", p.len())))
            }
            Injection::Prepend { tokens, deep: true } if tokens.len() != depth => {
                return Err(Error::Contract(format!("{} prompt layers for depth {depth}", tokens.len())))
            }
            Injection::Prepend { tokens, deep: false } if tokens.len() != 1 => {
                return Err(Error::Contract("shallow prompting takes one token block".into()))
            }
            _ => {}
        }
        let batch = images.len();
        let mut x = self.patch_embed(tape, vars, images)?;
        let mut attention = Vec::with_capacity(depth);
        let mut seq_lens = Vec::with_capacity(depth);
        let mut inserted = 0usize;
        for layer in 0..depth {
            let mut kv = None;
            match injection {
                Injection::None => {}
                Injection::KeyValue(p) => kv = Some(p[layer]),
                Injection::InputLevel(p) => x = tape.add_to_row(x, 0, p[layer])?,
                Injection::Prepend { tokens, deep } => {
                    if layer == 0 || *deep {
                        let idx = if *deep { layer } else { 0 };
                        let block = self.batched_tokens(tape, tokens[idx], batch)?;
                        let n = tape.shape(block)[1];
                        let total = tape.shape(x)[1];
                        let cls = tape.slice_rows(x, 0, 1)?;
                        let rest = tape.slice_rows(x, 1 + inserted, total)?;
                        let head = tape.concat_rows(cls, block)?;
                        x = tape.concat_rows(head, rest)?;
                        inserted = n;
                    }
                }
            }
            seq_lens.push(tape.shape(x)[1]);
            let (out, attn) = self.block(tape, vars, x, layer, kv, trim_last && layer + 1 == depth)?;
            x = out;
            attention.push(attn);
        }
        tape.set_scope(CostScope::Head);
        let cls = tape.slice_rows(x, 0, 1)?;
        let cls = tape.reshape(cls, &[batch, self.config.dim])?;
        let cls = tape.layernorm(cls, vars.norm_g, vars.norm_b, LN_EPS)?;
        Ok(ForwardTrace {
            cls,
            attention,
            seq_lens,
        })
    }

    fn batched_tokens(&self, tape: &mut Tape, tokens: Var, batch: usize) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        match s.as_slice() {
            [_, d] if *d == self.config.dim => Ok(tape.expand(tokens, batch)),
            [b, _, d] if *b == batch && *d == self.config.dim => Ok(tokens),
            _ => Err(Error::shape("prompt tokens", &s, &[batch, self.config.dim])),
        }
    }

    /// Named tensors for the weight container, geometry first.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("meta.config".to_string(), self.config_tensor())];
        for (n, t) in self.param_names().into_iter().zip(self.params()) {
            let mut t = t.clone();
            t.set_requires_grad(false);
            out.push((n, t));
        }
        out
    }

    fn config_tensor(&self) -> Tensor {
        let c = &self.config;
        let vals = [c.image_size, c.channels, c.patch_size, c.depth, c.dim, c.heads, c.mlp_ratio];
        Tensor::new(vec![7], vals.iter().map(|&v| v as f64).collect()).unwrap()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_tensors();
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_tensors(path, &refs)
    }

    /// Loads a model written by [`ViTModel::save`]. The result is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let list = load_tensors(path)?;
        Self::from_named(list)
    }

    pub fn from_named(mut list: Vec<(String, Tensor)>) -> Result<Self> {
        let meta = take_named(&mut list, "meta.config")?;
        if meta.numel() != 7 {
            return Err(Error::Format("meta.config must hold 7 values".into()));
        }
        let m: Vec<usize> = meta.data().iter().map(|&v| v as usize).collect();
        let config = ViTConfig {
            image_size: m[0],
            channels: m[1],
            patch_size: m[2],
            depth: m[3],
            dim: m[4],
            heads: m[5],
            mlp_ratio: m[6],
        };
        config.validate()?;
        let mut model = Self::new(config, 0)?;
        let names = model.param_names();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = take_named(&mut list, name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        model.frozen = true;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_names_cover_every_parameter() {
        let m = ViTModel::new(ViTConfig::tiny(), 1).unwrap();
        let names = m.param_names();
        assert_eq!(names.len(), m.params().len());
        assert!(names.contains(&"block.0.attn.wq".to_string()));
        assert!(names.contains(&"block.3.mlp.b2".to_string()));
    }

    #[test]
    fn freeze_drops_gradient_buffers() {
        let mut m = ViTModel::new(ViTConfig::tiny(), 1).unwrap();
        assert!(m.params().iter().all(|t| t.requires_grad()));
        m.freeze();
        assert!(m.is_frozen());
        assert!(m.params().iter().all(|t| !t.requires_grad() && t.grad().is_none()));
    }
}
