use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Selection of singular-vector columns an adapter acts on.
///
/// Contiguous ranges cover the top/bottom/block policies; explicit index
/// lists come from sampled column scheduling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnSelect {
    Range { start: usize, count: usize },
    Indices { indices: Vec<usize> },
}

impl ColumnSelect {
    /// The leading `r` columns.
    pub fn top(r: usize) -> Self {
        ColumnSelect::Range { start: 0, count: r }
    }

    /// The trailing `r` of `k` columns.
    pub fn bottom(r: usize, k: usize) -> Self {
        ColumnSelect::Range {
            start: k.saturating_sub(r),
            count: r,
        }
    }

    pub fn range(start: usize, count: usize) -> Self {
        ColumnSelect::Range { start, count }
    }

    /// Sorted, de-duplicated explicit selection; collapses to a range when
    /// the indices are contiguous.
    pub fn from_indices(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        let before = indices.len();
        indices.dedup();
        if indices.len() != before {
            return Err(Error::Precondition("column selection has duplicate indices".into()));
        }
        match (indices.first(), indices.last()) {
            (Some(&lo), Some(&hi)) if hi - lo + 1 == indices.len() => Ok(ColumnSelect::range(lo, indices.len())),
            _ => Ok(ColumnSelect::Indices { indices }),
        }
    }

    pub fn count(&self) -> usize {
        match self {
            ColumnSelect::Range { count, .. } => *count,
            ColumnSelect::Indices { indices } => indices.len(),
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        match self {
            ColumnSelect::Range { start, count } => (*start..start + count).collect(),
            ColumnSelect::Indices { indices } => indices.clone(),
        }
    }

    /// Checks the selection fits a decomposition with `k` columns.
    pub fn validate(&self, k: usize) -> Result<()> {
        let idx = self.indices();
        if let Some(&hi) = idx.iter().max() {
            if hi >= k {
                return Err(Error::Precondition(format!(
                    "column selection {self:?} exceeds the {k} available singular vectors"
                )));
            }
        }
        let unique: BTreeSet<_> = idx.iter().collect();
        if unique.len() != idx.len() {
            return Err(Error::Precondition("column selection has duplicate indices".into()));
        }
        Ok(())
    }

    /// Number of columns shared with `other`.
    pub fn overlap(&self, other: &ColumnSelect) -> usize {
        let a: BTreeSet<_> = self.indices().into_iter().collect();
        other.indices().iter().filter(|i| a.contains(i)).count()
    }
}
