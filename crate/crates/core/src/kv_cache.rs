//! The global append-only KV cache shared by every message in a workflow.
//!
//! Keys and values live in one contiguous token-major buffer per layer.
//! Each token carries its owning message id `m` and logical position `j`;
//! physical order and logical position are independent, which is what lets
//! parallel decodes interleave their tokens and lets messages be moved
//! without copying.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ChoreoError, Result};
use crate::tensor::{RotationTable, Scalar};
use crate::tokenizer::{self, TokenId};
use crate::MessageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub m: MessageId,
    pub j: usize,
    pub physical_index: usize,
    pub token_id: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Prefilled,
    Decoded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageSpan {
    pub id: MessageId,
    pub indices: Vec<usize>,
    pub offset: usize,
    pub length: usize,
    pub text: String,
    pub kind: MessageKind,
}

/// One token to be appended: its keys and values are `n_layers × n_heads × head_dim`
/// flattened layer-major, keys already rotated to `position`.
#[derive(Debug, Clone)]
pub struct KvEntry<T> {
    pub token: TokenId,
    pub message: MessageId,
    pub position: usize,
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

#[derive(Debug, Clone)]
struct SpanData {
    indices: Vec<usize>,
    offset: usize,
    kind: MessageKind,
}

#[derive(Debug, Clone)]
pub struct GlobalKvCache<T> {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    window: usize,
    capacity: usize,
    // keys[layer][token * width + head * head_dim + i]
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    meta: Vec<TokenMeta>,
    spans: Vec<SpanData>,
}

impl<T: Scalar> GlobalKvCache<T> {
    /// `capacity` is a hard limit on the number of cached tokens. Storage grows
    /// on demand up to that limit.
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, window: usize, capacity: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            head_dim,
            window,
            capacity,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            meta: Vec::new(),
            spans: Vec::new(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.meta.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn message_count(&self) -> usize {
        self.spans.len()
    }

    pub fn next_message_id(&self) -> MessageId {
        MessageId(self.spans.len())
    }

    pub fn contains(&self, id: MessageId) -> bool {
        id.0 < self.spans.len()
    }

    /// Allocate the next dense message id with an empty span.
    pub fn register_message(&mut self, kind: MessageKind, offset: usize) -> Result<MessageId> {
        if offset > self.window {
            return Err(ChoreoError::WindowOverflow {
                offset,
                length: 0,
                window: self.window,
            });
        }
        let id = self.next_message_id();
        self.spans.push(SpanData {
            indices: Vec::new(),
            offset,
            kind,
        });
        Ok(id)
    }

    pub fn append_tokens(&mut self, entries: Vec<KvEntry<T>>) -> Result<Range<usize>> {
        let start = self.token_count();
        let requested = start + entries.len();
        if requested > self.capacity {
            return Err(ChoreoError::CapacityExceeded {
                requested,
                capacity: self.capacity,
            });
        }
        // Validate the whole batch before touching anything.
        let expected_len = self.n_layers * self.width();
        let mut pending: Vec<(MessageId, usize)> = Vec::new();
        for e in &entries {
            if !self.contains(e.message) {
                return Err(ChoreoError::UnknownMessage(e.message));
            }
            if e.keys.len() != expected_len || e.values.len() != expected_len {
                return Err(ChoreoError::DimensionMismatch {
                    op: "append_tokens",
                    left: (e.keys.len(), e.values.len()),
                    right: (expected_len, expected_len),
                });
            }
            if e.position >= self.window {
                return Err(ChoreoError::PositionOutOfWindow {
                    position: e.position,
                    window: self.window,
                });
            }
            let added = match pending.iter_mut().find(|(m, _)| *m == e.message) {
                Some((_, n)) => {
                    *n += 1;
                    *n - 1
                }
                None => {
                    pending.push((e.message, 1));
                    0
                }
            };
            let span = &self.spans[e.message.0];
            let expected = span.offset + span.indices.len() + added;
            if e.position != expected {
                return Err(ChoreoError::NonConsecutivePosition {
                    message: e.message,
                    token: span.indices.len() + added,
                    expected,
                    got: e.position,
                });
            }
        }

        let width = self.width();
        for e in entries {
            let idx = self.meta.len();
            for layer in 0..self.n_layers {
                let range = layer * width..(layer + 1) * width;
                self.keys[layer].extend_from_slice(&e.keys[range.clone()]);
                self.values[layer].extend_from_slice(&e.values[range]);
            }
            self.meta.push(TokenMeta {
                m: e.message,
                j: e.position,
                physical_index: idx,
                token_id: e.token,
            });
            self.spans[e.message.0].indices.push(idx);
        }
        Ok(start..self.token_count())
    }

    pub fn meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    /// All heads' keys of one token at one layer.
    #[inline]
    pub fn key(&self, layer: usize, idx: usize) -> &[T] {
        let w = self.width();
        &self.keys[layer][idx * w..(idx + 1) * w]
    }

    #[inline]
    pub fn value(&self, layer: usize, idx: usize) -> &[T] {
        let w = self.width();
        &self.values[layer][idx * w..(idx + 1) * w]
    }

    pub fn span_indices(&self, id: MessageId) -> Result<&[usize]> {
        self.spans
            .get(id.0)
            .map(|s| s.indices.as_slice())
            .ok_or(ChoreoError::UnknownMessage(id))
    }

    pub fn message_offset(&self, id: MessageId) -> Result<usize> {
        self.spans
            .get(id.0)
            .map(|s| s.offset)
            .ok_or(ChoreoError::UnknownMessage(id))
    }

    pub fn message_len(&self, id: MessageId) -> Result<usize> {
        self.span_indices(id).map(<[usize]>::len)
    }

    pub fn message_tokens(&self, id: MessageId) -> Result<Vec<TokenId>> {
        Ok(self
            .span_indices(id)?
            .iter()
            .map(|i| self.meta[*i].token_id)
            .collect())
    }

    pub fn message_span(&self, id: MessageId) -> Result<MessageSpan> {
        let span = self.spans.get(id.0).ok_or(ChoreoError::UnknownMessage(id))?;
        let tokens = self.message_tokens(id)?;
        Ok(MessageSpan {
            id,
            indices: span.indices.clone(),
            offset: span.offset,
            length: span.indices.len(),
            text: tokenizer::decode_content(&tokens),
            kind: span.kind,
        })
    }

    /// One token's keys and values across all layers, flattened layer-major.
    pub fn token_kv(&self, idx: usize) -> (Vec<T>, Vec<T>) {
        let mut k = Vec::with_capacity(self.n_layers * self.width());
        let mut v = Vec::with_capacity(self.n_layers * self.width());
        for layer in 0..self.n_layers {
            k.extend_from_slice(self.key(layer, idx));
            v.extend_from_slice(self.value(layer, idx));
        }
        (k, v)
    }

    /// Copies of a message's stored keys and values, in token order.
    pub fn message_kv(&self, id: MessageId) -> Result<(Vec<T>, Vec<T>)> {
        let mut k = Vec::new();
        let mut v = Vec::new();
        for &idx in self.span_indices(id)? {
            for layer in 0..self.n_layers {
                k.extend_from_slice(self.key(layer, idx));
                v.extend_from_slice(self.value(layer, idx));
            }
        }
        Ok((k, v))
    }

    /// Move a message to start at `new_offset`, rotating its stored keys in
    /// place across every layer and head. Values, token ids and `m` are
    /// untouched. Returns the previous offset.
    ///
    /// Encodings of other messages that attended to this one are not
    /// recomputed.
    pub fn reposition_message(
        &mut self,
        id: MessageId,
        new_offset: usize,
        table: &RotationTable<T>,
    ) -> Result<usize> {
        self.check_reposition(id, new_offset)?;
        let old = self.spans[id.0].offset;
        if new_offset == old {
            return Ok(old);
        }
        let delta = new_offset as i64 - old as i64;
        let w = self.width();
        let hd = self.head_dim;
        let indices = self.spans[id.0].indices.clone();
        for &idx in &indices {
            for layer in 0..self.n_layers {
                let token = &mut self.keys[layer][idx * w..(idx + 1) * w];
                for head in token.chunks_exact_mut(hd) {
                    table.rotate_in_place(head, delta)?;
                }
            }
            let meta = &mut self.meta[idx];
            meta.j = (meta.j as i64 + delta) as usize;
        }
        self.spans[id.0].offset = new_offset;
        Ok(old)
    }

    /// Validation half of [`Self::reposition_message`], with no mutation.
    pub fn check_reposition(&self, id: MessageId, new_offset: usize) -> Result<()> {
        let len = self.message_len(id)?;
        if new_offset + len > self.window {
            return Err(ChoreoError::WindowOverflow {
                offset: new_offset,
                length: len,
                window: self.window,
            });
        }
        Ok(())
    }

    /// One JSON object per token: `{physical_index, m, j, token_id}`.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for meta in &self.meta {
            serde_json::to_writer(&mut out, meta).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
