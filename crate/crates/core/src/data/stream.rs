use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Classes partitioned into equal, disjoint tasks, with the matching sample
/// indices of a train and a test dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskStream {
    pub seed: u64,
    /// Class ids of each task, in the order their classifier columns are added.
    pub classes: Vec<Vec<usize>>,
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

/// Shuffles the class ids with `seed` and cuts them into `n_tasks` groups.
pub fn split_stream(train: &Dataset, test: &Dataset, n_tasks: usize, seed: u64) -> Result<TaskStream> {
    let n = train.n_classes;
    if test.n_classes != n {
        return Err(Error::Config(format!(
            "train set has {n} classes, test set {}",
            test.n_classes
        )));
    }
    if n_tasks == 0 || !n.is_multiple_of(n_tasks) {
        return Err(Error::Config(format!("{n} classes cannot be split into {n_tasks} equal tasks")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let classes: Vec<Vec<usize>> = order.chunks(n / n_tasks).map(<[usize]>::to_vec).collect();
    let mut task_of = vec![0usize; n];
    for (t, set) in classes.iter().enumerate() {
        for &c in set {
            task_of[c] = t;
        }
    }
    let bucket = |ds: &Dataset| {
        let mut out = vec![Vec::new(); n_tasks];
        for (i, &l) in ds.labels.iter().enumerate() {
            out[task_of[l]].push(i);
        }
        out
    };
    Ok(TaskStream {
        seed,
        train: bucket(train),
        test: bucket(test),
        classes,
    })
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.classes.len()
    }

    /// Class ids in classifier-column order.
    pub fn column_classes(&self) -> Vec<usize> {
        self.classes.concat()
    }

    /// Classifier column of `class`.
    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().flatten().position(|&c| c == class)
    }

    /// First classifier column of task `t`.
    pub fn first_column(&self, t: usize) -> usize {
        self.classes[..t].iter().map(Vec::len).sum()
    }

    /// Keeps the first `n` tasks.
    pub fn truncate(&mut self, n: usize) {
        self.classes.truncate(n);
        self.train.truncate(n);
        self.test.truncate(n);
    }
}
