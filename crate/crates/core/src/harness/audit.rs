use std::cell::RefCell;
use std::collections::BTreeSet;

use crate::data::Dataset;

/// Training-set view that records which samples each task reads.
#[derive(Debug)]
pub struct AuditedData<'a> {
    ds: &'a Dataset,
    reads: RefCell<Vec<BTreeSet<usize>>>,
}

impl<'a> AuditedData<'a> {
    pub fn new(ds: &'a Dataset) -> Self {
        Self {
            ds,
            reads: RefCell::new(Vec::new()),
        }
    }

    /// Image `i`, logged as read during `task`.
    pub fn fetch(&self, task: usize, i: usize) -> (&'a [f64], usize) {
        let mut reads = self.reads.borrow_mut();
        if reads.len() <= task {
            reads.resize_with(task + 1, BTreeSet::new);
        }
        reads[task].insert(i);
        (self.ds.image(i), self.ds.labels[i])
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    /// Sample indices read per task.
    pub fn log(&self) -> Vec<BTreeSet<usize>> {
        self.reads.borrow().clone()
    }
}
