//! Incremental-learning metrics over the accuracy matrix.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `R[t][i]`: accuracy on task `i` after training task `t`, defined for `i <= t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMatrix {
    n: usize,
    cells: Vec<Option<f64>>,
}

impl EvalMatrix {
    pub fn new(n_tasks: usize) -> Self {
        Self {
            n: n_tasks,
            cells: vec![None; n_tasks * n_tasks],
        }
    }

    /// Builds a matrix from full rows; row `t` must hold `t + 1` entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::Contract(format!("row {t} has {} entries, expected {}", row.len(), t + 1)));
            }
            for (i, &v) in row.iter().enumerate() {
                m.set(t, i, v)?;
            }
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, t: usize, i: usize, acc: f64) -> Result<()> {
        if t >= self.n || i > t {
            return Err(Error::Contract(format!("cell ({t}, {i}) outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Contract(format!("accuracy {acc} outside [0, 1]")));
        }
        self.cells[t * self.n + i] = Some(acc);
        Ok(())
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        if t < self.n && i < self.n {
            self.cells[t * self.n + i]
        } else {
            None
        }
    }

    fn need(&self, t: usize, i: usize) -> Result<f64> {
        self.get(t, i)
            .ok_or_else(|| Error::Contract(format!("accuracy matrix entry ({t}, {i}) is not populated")))
    }

    /// CSV with one line per evaluated row; cells above the diagonal are blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after_task");
        for i in 0..self.n {
            write!(out, ",task_{i}").unwrap();
        }
        out.push('\n');
        for t in 0..self.n {
            write!(out, "{t}").unwrap();
            for i in 0..self.n {
                match self.get(t, i) {
                    Some(v) if i <= t => write!(out, ",{v}").unwrap(),
                    _ => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean of row `last` (zero-based index of the final task).
pub fn avg_accuracy(r: &EvalMatrix, last: usize) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..=last {
        sum += r.need(last, i)?;
    }
    Ok(sum / (last + 1) as f64)
}

/// Mean drop from each earlier task's just-trained accuracy to its accuracy
/// after task `last`. Zero when only one task exists.
pub fn forgetting(r: &EvalMatrix, last: usize) -> Result<f64> {
    r.need(last, last)?;
    if last == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..last {
        sum += r.need(i, i)? - r.need(last, i)?;
    }
    Ok(sum / last as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_example() {
        let r = EvalMatrix::from_rows(&[vec![0.9], vec![0.8, 0.85]]).unwrap();
        assert_eq!(avg_accuracy(&r, 1).unwrap(), 0.825);
        assert!((forgetting(&r, 1).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(r.to_csv(), "after_task,task_0,task_1\n0,0.9,\n1,0.8,0.85\n");
    }

    #[test]
    fn conventions() {
        let single = EvalMatrix::from_rows(&[vec![0.9]]).unwrap();
        assert_eq!(avg_accuracy(&single, 0).unwrap(), 0.9);
        assert_eq!(forgetting(&single, 0).unwrap(), 0.0);
        let ones = EvalMatrix::from_rows(&[vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(avg_accuracy(&ones, 1).unwrap(), 1.0);
        assert_eq!(forgetting(&ones, 1).unwrap(), 0.0);
        let better = EvalMatrix::from_rows(&[vec![0.5], vec![0.7, 0.6]]).unwrap();
        assert!((forgetting(&better, 1).unwrap() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn missing_entries_are_errors() {
        let mut r = EvalMatrix::new(2);
        r.set(0, 0, 0.5).unwrap();
        assert!(avg_accuracy(&r, 1).is_err());
        assert!(forgetting(&r, 1).is_err());
        assert!(r.set(0, 1, 0.5).is_err());
        assert!(r.set(1, 0, 1.5).is_err());
    }
}
