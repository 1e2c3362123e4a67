use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{load_tensors, save_tensors, take_named};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{Injection, ViTConfig};

/// Per-layer key and value prompts: two `d`-vectors per block, nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

/// Zero prompts for every block of `config`. A model carrying them computes
/// exactly what the bare backbone computes.
pub fn init_prompts(config: &ViTConfig) -> PromptSet {
    PromptSet::zeros(config.depth, config.dim)
}

impl PromptSet {
    pub fn zeros(depth: usize, dim: usize) -> Self {
        let make = || (0..depth).map(|_| Tensor::zeros(&[dim]).trainable()).collect();
        Self {
            keys: make(),
            values: make(),
        }
    }

    /// Gaussian prompts, mostly for tests and gradient checks.
    pub fn random(depth: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = || -> Vec<Tensor> {
            (0..depth)
                .map(|_| Tensor::randn(&[dim], std, &mut rng).trainable())
                .collect()
        };
        let keys = make();
        let values = make();
        Self { keys, values }
    }

    pub fn from_vectors(keys: Vec<Vec<f64>>, values: Vec<Vec<f64>>) -> Result<Self> {
        if keys.len() != values.len() || keys.is_empty() {
            return Err(Error::Contract("prompt sets need matching, non-empty layer lists".into()));
        }
        let dim = keys[0].len();
        let wrap = |vs: Vec<Vec<f64>>| -> Result<Vec<Tensor>> {
            vs.into_iter()
                .map(|v| {
                    if v.len() != dim {
                        return Err(Error::shape("prompt", &[v.len()], &[dim]));
                    }
                    Ok(Tensor::new(vec![dim], v)?.trainable())
                })
                .collect()
        };
        Ok(Self {
            keys: wrap(keys)?,
            values: wrap(values)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.keys.len()
    }

    pub fn dim(&self) -> usize {
        self.keys[0].numel()
    }

    pub fn param_count(&self) -> usize {
        2 * self.depth() * self.dim()
    }

    pub fn key(&self, layer: usize) -> &[f64] {
        self.keys[layer].data()
    }

    pub fn value(&self, layer: usize) -> &[f64] {
        self.values[layer].data()
    }

    /// Interleaved `k₀, v₀, k₁, v₁, …`; the order optimizers rely on.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.keys
            .iter_mut()
            .zip(self.values.iter_mut())
            .flat_map(|(k, v)| [k, v])
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.keys.iter().zip(&self.values).flat_map(|(k, v)| [k, v]).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.round_to_f32();
        }
    }

    pub fn bits_eq(&self, other: &PromptSet) -> bool {
        self.depth() == other.depth()
            && self.params().iter().zip(other.params()).all(|(a, b)| a.bits_eq(b))
    }

    pub fn same_geometry(&self, other: &PromptSet) -> bool {
        self.depth() == other.depth() && self.dim() == other.dim()
    }

    /// Records every vector as a tape leaf, `(p_k, p_v)` per layer.
    pub fn register(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.keys
            .iter()
            .zip(&self.values)
            .map(|(k, v)| (tape.leaf(k), tape.leaf(v)))
            .collect()
    }

    /// Pulls gradients for the handles returned by [`PromptSet::register`].
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[(Var, Var)]) -> Result<()> {
        for ((k, v), (kv, vv)) in self.keys.iter_mut().zip(self.values.iter_mut()).zip(vars) {
            tape.accumulate_into(*kv, k)?;
            tape.accumulate_into(*vv, v)?;
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.depth());
        for (l, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            out.push((format!("prompt.{l}.k"), k.clone()));
            out.push((format!("prompt.{l}.v"), v.clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_tensors();
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_tensors(path, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named(load_tensors(path)?)
    }

    pub fn from_named(mut list: Vec<(String, Tensor)>) -> Result<Self> {
        let depth = list.iter().filter(|(n, _)| n.ends_with(".k") && n.starts_with("prompt.")).count();
        if depth == 0 {
            return Err(Error::Format("no prompt tensors in file".into()));
        }
        let (mut keys, mut values) = (Vec::new(), Vec::new());
        for l in 0..depth {
            keys.push(take_named(&mut list, &format!("prompt.{l}.k"))?.into_data());
            values.push(take_named(&mut list, &format!("prompt.{l}.v"))?.into_data());
        }
        Self::from_vectors(keys, values)
    }
}

/// `(k_cls + p_k, v_cls + p_v)`.
pub fn apply_additive(
    k_cls: &[f64],
    v_cls: &[f64],
    p_k: &[f64],
    p_v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = k_cls.len();
    if v_cls.len() != d || p_k.len() != d || p_v.len() != d {
        return Err(Error::shape("apply_additive", &[d, v_cls.len()], &[p_k.len(), p_v.len()]));
    }
    let k = k_cls.iter().zip(p_k).map(|(a, b)| a + b).collect();
    let v = v_cls.iter().zip(p_v).map(|(a, b)| a + b).collect();
    Ok((k, v))
}

/// Progressive fusion `alpha·old + (1 − alpha)·new`, vector by vector.
pub fn ppf_fuse(old: &PromptSet, new: &PromptSet, alpha: f64) -> Result<PromptSet> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("fusion coefficient {alpha} outside [0, 1]")));
    }
    if !old.same_geometry(new) {
        return Err(Error::shape(
            "ppf_fuse",
            &[old.depth(), old.dim()],
            &[new.depth(), new.dim()],
        ));
    }
    let mix = |a: &[Tensor], b: &[Tensor]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(o, n)| alpha * o + (1.0 - alpha) * n)
                    .collect()
            })
            .collect()
    };
    PromptSet::from_vectors(mix(&old.keys, &new.keys), mix(&old.values, &new.values))
}

/// Adds `p` to the CLS row (row 0) of every `[n, d]` sequence in `x`.
pub fn apply_input_level(x: &Tensor, p: &[f64]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] != p.len() {
        return Err(Error::shape("apply_input_level", s, &[p.len()]));
    }
    let (n, d) = (s[s.len() - 2], p.len());
    let mut out = x.clone();
    for seq in out.data_mut().chunks_mut(n * d) {
        for (v, q) in seq[..d].iter_mut().zip(p) {
            *v += q;
        }
    }
    Ok(out)
}

/// Where the additive prompts enter a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddPoint {
    /// Shift the CLS key and value projections.
    KeyValue,
    /// Ablation: shift the CLS row of the block input by the key prompt.
    InputLevel,
}

impl PromptSet {
    pub fn injection(&self, tape: &mut Tape, point: AddPoint) -> (Injection, Vec<(Var, Var)>) {
        let vars = self.register(tape);
        let inj = match point {
            AddPoint::KeyValue => Injection::KeyValue(vars.clone()),
            AddPoint::InputLevel => Injection::InputLevel(vars.iter().map(|(k, _)| *k).collect()),
        };
        (inj, vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_counts() {
        assert_eq!(init_prompts(&ViTConfig::tiny()).param_count(), 512);
        assert_eq!(init_prompts(&ViTConfig::vit_b16()).param_count(), 18_432);
        let p = init_prompts(&ViTConfig::tiny());
        assert!(p.params().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(p.params().len(), 2 * 4);
    }

    #[test]
    fn additive_examples() {
        let (k, v) = apply_additive(&[1.0, 2.0], &[3.0, 4.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!((k, v), (vec![1.0, 2.0], vec![3.0, 4.0]));
        let (k, _) = apply_additive(&[1.0, 2.0], &[0.0, 0.0], &[0.5, -2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(k, vec![1.5, 0.0]);
        assert!(apply_additive(&[1.0], &[1.0, 2.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn additive_composes() {
        let (k0, v0) = ([0.3, -1.0, 2.0], [1.0, 1.0, -4.0]);
        let (p, q) = ([0.25, 0.5, -0.75], [1.0, -2.0, 0.125]);
        let (p2, q2) = ([2.0, 0.0, 0.5], [-0.5, 0.25, 1.0]);
        let (k1, v1) = apply_additive(&k0, &v0, &p, &q).unwrap();
        let (k2, v2) = apply_additive(&k1, &v1, &p2, &q2).unwrap();
        let ps: Vec<f64> = p.iter().zip(&p2).map(|(a, b)| a + b).collect();
        let qs: Vec<f64> = q.iter().zip(&q2).map(|(a, b)| a + b).collect();
        let (k3, v3) = apply_additive(&k0, &v0, &ps, &qs).unwrap();
        for (a, b) in k2.iter().chain(&v2).zip(k3.iter().chain(&v3)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_arithmetic_and_validation() {
        let ones = PromptSet::from_vectors(vec![vec![1.0; 3]; 2], vec![vec![1.0; 3]; 2]).unwrap();
        let zeros = PromptSet::zeros(2, 3);
        let f = ppf_fuse(&ones, &zeros, 0.7).unwrap();
        assert!(f.params().iter().all(|t| t.data().iter().all(|&v| (v - 0.7).abs() < 1e-15)));
        assert!(ppf_fuse(&ones, &zeros, 1.5).is_err());
        assert!(ppf_fuse(&ones, &zeros, -0.1).is_err());
        assert!(ppf_fuse(&ones, &PromptSet::zeros(3, 3), 0.5).is_err());
    }

    #[test]
    fn input_level_touches_only_cls_rows() {
        let x = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        let y = apply_input_level(&x, &[10.0, -1.0]).unwrap();
        assert_eq!(y.data(), &[10.0, 0.0, 2.0, 3.0, 4.0, 5.0, 16.0, 6.0, 8.0, 9.0, 10.0, 11.0]);
        assert!(apply_input_level(&x, &[0.0, 0.0]).unwrap().bits_eq(&x));
        assert!(apply_input_level(&x, &[1.0]).is_err());
    }
}
