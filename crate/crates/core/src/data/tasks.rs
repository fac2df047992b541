use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    pub class_ids: Vec<usize>,
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }
}

/// Ordered, class-disjoint tasks. Output column `j` of a model corresponds to
/// `class_order()[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    tasks: Vec<TaskSpec>,
}

impl TaskSequence {
    pub fn from_tasks(class_lists: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut tasks = Vec::with_capacity(class_lists.len());
        for (index, class_ids) in class_lists.into_iter().enumerate() {
            if class_ids.is_empty() {
                return Err(Error::Config(format!("task {index} has no classes")));
            }
            for &c in &class_ids {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} appears in more than one task")));
                }
            }
            tasks.push(TaskSpec { index, class_ids });
        }
        if tasks.is_empty() {
            return Err(Error::Config("task sequence is empty".into()));
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &TaskSpec {
        &self.tasks[t]
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Number of incremental steps after the base task.
    pub fn increments(&self) -> usize {
        self.tasks.len() - 1
    }

    /// Cumulative class count through task `t` inclusive.
    pub fn seen_classes(&self, t: usize) -> usize {
        self.tasks[..=t].iter().map(TaskSpec::num_classes).sum()
    }

    pub fn class_order(&self) -> Vec<usize> {
        self.tasks.iter().flat_map(|t| t.class_ids.iter().copied()).collect()
    }

    /// Global class ids seen through task `t`, in column order.
    pub fn seen_class_ids(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t]
            .iter()
            .flat_map(|t| t.class_ids.iter().copied())
            .collect()
    }

    pub fn column_of(&self, class_id: usize) -> Option<usize> {
        self.class_order().iter().position(|&c| c == class_id)
    }

    /// Map from global class id to output column, sized to cover every id.
    pub fn column_map(&self) -> Vec<Option<usize>> {
        let order = self.class_order();
        let max = order.iter().copied().max().unwrap_or(0);
        let mut map = vec![None; max + 1];
        for (col, &c) in order.iter().enumerate() {
            map[c] = Some(col);
        }
        map
    }
}

/// Base task with `ceil(n/2)` classes followed by `increments` equal tasks, over
/// a seed-determined class permutation.
pub fn build_task_sequence(num_classes: usize, increments: usize, seed: u64) -> Result<TaskSequence> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes for an incremental protocol, got {num_classes}"
        )));
    }
    let base = num_classes.div_ceil(2);
    let rest = num_classes - base;
    if increments > 0 && rest % increments != 0 {
        return Err(Error::Config(format!(
            "{rest} incremental classes (of {num_classes}) cannot be split equally over {increments} steps"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut substream(seed, "class-order", 0));

    let mut lists = Vec::with_capacity(increments + 1);
    if increments == 0 {
        lists.push(order);
    } else {
        let per = rest / increments;
        lists.push(order[..base].to_vec());
        for k in 0..increments {
            lists.push(order[base + k * per..base + (k + 1) * per].to_vec());
        }
    }
    TaskSequence::from_tasks(lists)
}
