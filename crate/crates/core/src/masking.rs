//! Dynamic attention visibility computed from `(m, j)` metadata.
//!
//! A token sees every token of its message's parents, plus the tokens of its
//! own message up to and including itself. Nothing else is visible: not
//! siblings decoded in the same batch, and not the parents of parents.
//! Visibility never looks at logical positions.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{ChoreoError, Result};
use crate::kv_cache::{GlobalKvCache, TokenMeta};
use crate::tensor::Scalar;
use crate::MessageId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilitySpec {
    pub message: MessageId,
    pub parents: BTreeSet<MessageId>,
}

impl VisibilitySpec {
    pub fn new(message: MessageId, parents: impl IntoIterator<Item = MessageId>) -> Self {
        Self {
            message,
            parents: parents.into_iter().collect(),
        }
    }
}

/// Within-message order is physical order: a message's tokens are always
/// appended in sequence, even when interleaved with other messages.
pub fn visible(query: &TokenMeta, spec: &VisibilitySpec, key: &TokenMeta) -> bool {
    debug_assert_eq!(query.m, spec.message);
    spec.parents.contains(&key.m)
        || (key.m == query.m && key.physical_index <= query.physical_index)
}

fn spec_for(specs: &[VisibilitySpec], m: MessageId) -> Result<&VisibilitySpec> {
    specs
        .iter()
        .find(|s| s.message == m)
        .ok_or(ChoreoError::UnknownMessage(m))
}

/// Reject specs whose parents include themselves or another message of the
/// same batch.
pub fn validate_specs(specs: &[VisibilitySpec]) -> Result<()> {
    let batch: BTreeSet<MessageId> = specs.iter().map(|s| s.message).collect();
    for s in specs {
        if let Some(p) = s.parents.iter().find(|p| batch.contains(p)) {
            return Err(ChoreoError::CrossBatchParent { parent: *p });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DenseMask {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Vec<bool>>,
}

impl DenseMask {
    /// `#` for visible, `.` for hidden; one line per query row.
    pub fn render(&self) -> String {
        self.cells
            .iter()
            .map(|r| r.iter().map(|c| if *c { '#' } else { '.' }).collect::<String>())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Metadata for the new tokens of a forward step, with the physical indices
/// they will receive once appended.
pub fn provisional_meta(cache_len: usize, batch: &[(MessageId, usize)]) -> Vec<TokenMeta> {
    batch
        .iter()
        .enumerate()
        .map(|(i, (m, j))| TokenMeta {
            m: *m,
            j: *j,
            physical_index: cache_len + i,
            token_id: 0,
        })
        .collect()
}

/// Pointwise materialization of [`visible`] over `cache ++ batch` columns.
pub fn build_dense_mask(
    batch: &[TokenMeta],
    cache: &[TokenMeta],
    specs: &[VisibilitySpec],
) -> Result<DenseMask> {
    let cols = cache.len() + batch.len();
    let mut cells = Vec::with_capacity(batch.len());
    for q in batch {
        let spec = spec_for(specs, q.m)?;
        let row = cache
            .iter()
            .chain(batch)
            .map(|k| visible(q, spec, k))
            .collect();
        cells.push(row);
    }
    Ok(DenseMask {
        rows: batch.len(),
        cols,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseRow {
    pub group: usize,
    /// Visible positions within the batch, ascending.
    pub batch: Vec<usize>,
}

/// Index-list form of the mask used by the forward pass. Rows belonging to
/// the same message share one list of visible cached tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    pub cache_len: usize,
    /// Visible cached indices per message group, ascending.
    pub cached: Vec<Vec<usize>>,
    pub rows: Vec<SparseRow>,
}

impl SparseMask {
    /// Visible columns of one row in the `cache ++ batch` index space.
    pub fn row_cols(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.rows[r];
        self.cached[row.group]
            .iter()
            .copied()
            .chain(row.batch.iter().map(move |b| self.cache_len + b))
    }

    pub fn row_len(&self, r: usize) -> usize {
        let row = &self.rows[r];
        self.cached[row.group].len() + row.batch.len()
    }

    pub fn to_dense(&self) -> DenseMask {
        let cols = self.cache_len + self.rows.len();
        let cells = (0..self.rows.len())
            .map(|r| {
                let mut row = vec![false; cols];
                for c in self.row_cols(r) {
                    row[c] = true;
                }
                row
            })
            .collect();
        DenseMask {
            rows: self.rows.len(),
            cols,
            cells,
        }
    }
}

/// Build the mask from message spans rather than scanning every cached token.
pub fn build_sparse_mask<T: Scalar>(
    cache: &GlobalKvCache<T>,
    batch_messages: &[MessageId],
    specs: &[VisibilitySpec],
) -> Result<SparseMask> {
    let mut groups: Vec<MessageId> = Vec::new();
    let mut cached = Vec::new();
    let mut rows = Vec::with_capacity(batch_messages.len());
    let mut batch_by_group: Vec<Vec<usize>> = Vec::new();
    for (b, m) in batch_messages.iter().enumerate() {
        let group = match groups.iter().position(|g| g == m) {
            Some(g) => g,
            None => {
                let spec = spec_for(specs, *m)?;
                let mut idx: Vec<usize> = Vec::new();
                for p in &spec.parents {
                    idx.extend_from_slice(cache.span_indices(*p)?);
                }
                if cache.contains(*m) {
                    idx.extend_from_slice(cache.span_indices(*m)?);
                }
                idx.sort_unstable();
                groups.push(*m);
                cached.push(idx);
                batch_by_group.push(Vec::new());
                groups.len() - 1
            }
        };
        batch_by_group[group].push(b);
        rows.push(SparseRow {
            group,
            batch: batch_by_group[group].clone(),
        });
    }
    Ok(SparseMask {
        cache_len: cache.token_count(),
        cached,
        rows,
    })
}
