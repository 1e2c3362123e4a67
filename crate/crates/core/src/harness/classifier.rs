use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One task's slice of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadBlock {
    pub classes: Vec<usize>,
    pub w: Tensor,
    pub b: Tensor,
}

/// Linear classifier that grows by one zero-initialised block per task.
/// Earlier blocks are frozen when a new one is added.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowingClassifier {
    dim: usize,
    blocks: Vec<HeadBlock>,
}

impl GrowingClassifier {
    pub fn new(dim: usize) -> Self {
        Self { dim, blocks: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_tasks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[HeadBlock] {
        &self.blocks
    }

    /// Number of seen classes, one column each.
    pub fn c_seen(&self) -> usize {
        self.blocks.iter().map(|b| b.classes.len()).sum()
    }

    /// Class id of every column, in column order.
    pub fn column_classes(&self) -> Vec<usize> {
        self.blocks.iter().flat_map(|b| b.classes.iter().copied()).collect()
    }

    /// Freezes the existing columns and appends trainable zero columns for `classes`.
    pub fn extend(&mut self, classes: &[usize]) -> Result<()> {
        if classes.is_empty() {
            return Err(Error::Contract("a task needs at least one class".into()));
        }
        for b in &mut self.blocks {
            b.w.set_requires_grad(false);
            b.b.set_requires_grad(false);
        }
        let c = classes.len();
        self.blocks.push(HeadBlock {
            classes: classes.to_vec(),
            w: Tensor::zeros(&[self.dim, c]).trainable(),
            b: Tensor::zeros(&[c]).trainable(),
        });
        Ok(())
    }

    pub fn current_mut(&mut self) -> Result<&mut HeadBlock> {
        self.blocks
            .last_mut()
            .ok_or_else(|| Error::Contract("classifier has no task block".into()))
    }

    /// Logits of the newest block only, `[b, c_t]`.
    pub fn current_logits(&self, tape: &mut Tape, features: Var) -> Result<(Var, Var, Var)> {
        let blk = self
            .blocks
            .last()
            .ok_or_else(|| Error::Contract("classifier has no task block".into()))?;
        let w = tape.leaf(&blk.w);
        let b = tape.leaf(&blk.b);
        let z = tape.matmul(features, w)?;
        Ok((tape.add_broadcast(z, b)?, w, b))
    }

    /// Logits over every seen column for one feature row.
    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.c_seen());
        for blk in &self.blocks {
            let c = blk.classes.len();
            let w = blk.w.data();
            for j in 0..c {
                let mut z = blk.b.data()[j];
                for (k, f) in feature.iter().enumerate() {
                    z += f * w[k * c + j];
                }
                out.push(z);
            }
        }
        out
    }

    /// Column with the largest logit; ties go to the lowest column.
    pub fn predict_column(&self, feature: &[f64]) -> Result<usize> {
        if self.blocks.is_empty() {
            return Err(Error::Contract("prediction before any task was trained".into()));
        }
        Ok(argmax(&self.logits(feature)))
    }

    pub fn bits_eq_prefix(&self, other: &GrowingClassifier, n_blocks: usize) -> bool {
        self.blocks.len() >= n_blocks
            && other.blocks.len() >= n_blocks
            && self.blocks[..n_blocks]
                .iter()
                .zip(&other.blocks[..n_blocks])
                .all(|(a, b)| a.classes == b.classes && a.w.bits_eq(&b.w) && a.b.bits_eq(&b.b))
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grows_and_freezes() {
        let mut h = GrowingClassifier::new(3);
        h.extend(&[4, 7]).unwrap();
        assert!(h.blocks()[0].w.requires_grad());
        h.extend(&[1]).unwrap();
        assert_eq!(h.c_seen(), 3);
        assert_eq!(h.column_classes(), vec![4, 7, 1]);
        assert!(!h.blocks()[0].w.requires_grad() && !h.blocks()[0].b.requires_grad());
        assert!(h.blocks()[1].w.requires_grad());
    }

    #[test]
    fn ties_break_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let mut h = GrowingClassifier::new(2);
        h.extend(&[0, 1]).unwrap();
        assert_eq!(h.predict_column(&[1.0, -1.0]).unwrap(), 0);
        assert!(GrowingClassifier::new(2).predict_column(&[0.0, 0.0]).is_err());
    }
}
