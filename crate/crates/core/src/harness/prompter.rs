use std::path::Path;

use crate::error::{Error, Result};
use crate::io::save_tensors;
use crate::prompt::{AddPoint, ConcatPromptSet, PromptPool, PromptSet};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{ForwardTrace, Injection, ModelVars, ViTModel};

/// Whatever trainable prompt state a method carries.
#[derive(Debug, Clone, PartialEq)]
pub enum Prompter {
    None,
    Additive { set: PromptSet, point: AddPoint },
    Concat(ConcatPromptSet),
    Pool(PromptPool),
}

/// Tape handles of the prompt leaves of one forward pass.
#[derive(Debug, Clone)]
pub enum Handles {
    None,
    Additive(Vec<(Var, Var)>),
    Concat(Vec<Var>),
    Pool(Var),
}

impl Prompter {
    pub fn is_none(&self) -> bool {
        matches!(self, Prompter::None)
    }

    /// CLS features of `images`; `selection` gives pool entries per image.
    /// The final block is trimmed to the CLS row, see [`ViTModel::features`].
    pub fn forward(
        &self,
        model: &ViTModel,
        tape: &mut Tape,
        vars: &ModelVars,
        images: &[&[f64]],
        selection: Option<&[Vec<usize>]>,
    ) -> Result<(ForwardTrace, Handles)> {
        let (inj, handles) = match self {
            Prompter::None => (Injection::None, Handles::None),
            Prompter::Additive { set, point } => {
                let (inj, vars) = set.injection(tape, *point);
                (inj, Handles::Additive(vars))
            }
            Prompter::Concat(c) => {
                let (inj, vars) = c.injection(tape);
                (inj, Handles::Concat(vars))
            }
            Prompter::Pool(pool) => {
                let sel = selection
                    .ok_or_else(|| Error::Contract("pool forward needs a key selection".into()))?;
                let (inj, var) = pool.injection(tape, sel)?;
                (inj, Handles::Pool(var))
            }
        };
        Ok((model.features(tape, vars, images, &inj)?, handles))
    }

    pub fn collect_grads(&mut self, tape: &Tape, handles: &Handles) -> Result<()> {
        match (self, handles) {
            (Prompter::None, Handles::None) => Ok(()),
            (Prompter::Additive { set, .. }, Handles::Additive(v)) => set.collect_grads(tape, v),
            (Prompter::Concat(c), Handles::Concat(v)) => c.collect_grads(tape, v),
            (Prompter::Pool(p), Handles::Pool(v)) => p.collect_grads(tape, *v),
            _ => Err(Error::Contract("prompt handles do not match the prompt state".into())),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Prompter::None => Vec::new(),
            Prompter::Additive { set, .. } => set.params_mut(),
            Prompter::Concat(c) => c.params_mut(),
            Prompter::Pool(p) => p.params_mut(),
        }
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

    pub fn param_count(&self) -> usize {
        match self {
            Prompter::None => 0,
            Prompter::Additive { set, .. } => set.param_count(),
            Prompter::Concat(c) => c.param_count(),
            Prompter::Pool(p) => p.param_count(),
        }
    }

    /// Writes the prompt tensors to an `APTW` file; nothing for `None`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, Tensor)> = match self {
            Prompter::None => return Ok(()),
            Prompter::Additive { set, .. } => set.named_tensors(),
            Prompter::Concat(c) => c
                .params()
                .into_iter()
                .enumerate()
                .map(|(l, t)| (format!("vpt.{l}.tokens"), t.clone()))
                .collect(),
            Prompter::Pool(p) => vec![
                ("pool.keys".to_string(), p.keys().clone()),
                ("pool.prompts".to_string(), p.prompts().clone()),
            ],
        };
        let refs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_tensors(path, &refs)
    }
}
