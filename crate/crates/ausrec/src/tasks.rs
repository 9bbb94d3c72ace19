//! Mining the seven self-supervised auxiliary relation sets from the
//! interaction matrix `R` and social matrix `S`.
//!
//! Each task yields a binary matrix of positive user pairs with a zero
//! diagonal. Pairs may appear in several tasks; the sets are independent
//! label sets, not a partition.

use serde::Serialize;

use crate::sparse::{Dataset, SparseMatrix};
use crate::{Error, Result};

pub const NUM_TASKS: usize = 7;

/// The seven auxiliary relation kinds, in fixed index order 1..=7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TaskKind {
    /// Socially connected pair closing a length-2 social path: `(SS) ⊙ S`.
    SocialTriangle,
    /// Socially connected pair sharing an interacted item: `(RR^T) ⊙ S`.
    JointTriangle,
    /// Social distance exactly 1 (the social edges themselves).
    Hop1,
    /// Social distance exactly 2.
    Hop2,
    /// Social distance exactly 3.
    Hop3,
    /// Pair connected through a shared item: `u -> v -> u'`.
    MetaUvu,
    /// Pair connected through a social hop then a shared item:
    /// `u -> u' -> v -> u''`, collapsed to the endpoints `(u, u'')`.
    MetaUuvu,
}

impl TaskKind {
    pub const ALL: [TaskKind; NUM_TASKS] = [
        TaskKind::SocialTriangle,
        TaskKind::JointTriangle,
        TaskKind::Hop1,
        TaskKind::Hop2,
        TaskKind::Hop3,
        TaskKind::MetaUvu,
        TaskKind::MetaUuvu,
    ];
}

/// A task identifier carrying both the 1-based index and the kind; the
/// mapping between them is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaskId {
    index: usize,
    kind: TaskKind,
}

impl TaskId {
    /// Task for a 1-based index in `1..=7`.
    pub fn from_index(index: usize) -> Result<TaskId> {
        if index == 0 || index > NUM_TASKS {
            return Err(Error::InvalidArgument(format!(
                "task index {index} outside 1..=7"
            )));
        }
        Ok(TaskId {
            index,
            kind: TaskKind::ALL[index - 1],
        })
    }

    pub fn from_kind(kind: TaskKind) -> TaskId {
        let index = TaskKind::ALL.iter().position(|&k| k == kind).unwrap() + 1;
        TaskId { index, kind }
    }

    pub fn all() -> impl Iterator<Item = TaskId> {
        TaskKind::ALL.into_iter().map(TaskId::from_kind)
    }

    /// 1-based index.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    /// Zero-based slot in one-hot encodings and weight logs.
    pub fn slot(&self) -> usize {
        self.index - 1
    }

    pub fn label(&self) -> String {
        format!("ssl{}", self.index)
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ssl{} ({:?})", self.index, self.kind)
    }
}

/// The positive user pairs of one auxiliary task.
#[derive(Debug, Clone)]
pub struct RelationSet {
    task: TaskId,
    pairs: SparseMatrix,
}

impl RelationSet {
    pub fn task(&self) -> TaskId {
        self.task
    }

    /// Binary `m x m` positive-pair matrix with zero diagonal. Symmetric for
    /// every task except `MetaUuvu`, whose path definition is directional.
    pub fn pairs(&self) -> &SparseMatrix {
        &self.pairs
    }

    pub fn positive_count(&self) -> usize {
        self.pairs.nnz()
    }
}

/// Mines one task's positive pairs. The diagonal is removed from every
/// result.
pub fn mine_task(d: &Dataset, task: TaskId) -> Result<RelationSet> {
    let s = d.social();
    let r = d.interactions();
    let pairs = match task.kind() {
        TaskKind::SocialTriangle => s.bool_product(s)?.hadamard_mask(s)?,
        TaskKind::JointTriangle => r.bool_product(&r.transpose())?.hadamard_mask(s)?,
        TaskKind::Hop1 => s.exact_k_hop(1)?,
        TaskKind::Hop2 => s.exact_k_hop(2)?,
        TaskKind::Hop3 => s.exact_k_hop(3)?,
        TaskKind::MetaUvu => r.bool_product(&r.transpose())?,
        TaskKind::MetaUuvu => s.bool_product(&r.bool_product(&r.transpose())?)?,
    };
    Ok(RelationSet {
        task,
        pairs: pairs.remove_diagonal(),
    })
}

/// Mines all seven tasks in index order, logging per-task positive counts.
/// Tasks with zero positives are retained and flagged.
pub fn mine_all(d: &Dataset) -> Result<Vec<RelationSet>> {
    TaskId::all()
        .map(|task| {
            let set = mine_task(d, task)?;
            if set.positive_count() == 0 {
                log::warn!("task {task} mined zero positive pairs");
            } else {
                log::info!("task {task}: {} positive pairs", set.positive_count());
            }
            Ok(set)
        })
        .collect()
}
