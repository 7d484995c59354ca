//! The choreographed engine: `prefill` and `decode` over a global KV cache.
//!
//! Every call is validated in full before anything is mutated. Execution
//! then repositions parents to their resolved offsets (destructively),
//! registers fresh message ids, and runs batched forward steps whose masks
//! let each new message see only its parents and its own earlier tokens.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cost::{count_flops, reposition_flops, CallCost};
use crate::error::{ChoreoError, Result};
use crate::kv_cache::{GlobalKvCache, MessageKind};
use crate::masking::VisibilitySpec;
use crate::model::{CacheView, Model, ModelConfig, NewToken};
use crate::sampling::{sample, SamplingParams};
use crate::tensor::Scalar;
use crate::tokenizer::{decode_content, encode_bytes, frame, TokenId, EOS_MSG};
use crate::MessageId;

/// Per-message logits rows of a parallel prefill, one row per token.
pub type PrefillLogits = Vec<Vec<Vec<f64>>>;

/// Parents, optional offsets, optional new offset and token count of one call.
type CallShape<'a> = (&'a [MessageId], &'a [Option<usize>], Option<usize>, usize);

/// Default hard limit on cached tokens.
pub const DEFAULT_CAPACITY: usize = 65536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Prefill,
    Decode,
    PrefillParallel,
    DecodeParallel,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Prefill => "prefill",
            Op::Decode => "decode",
            Op::PrefillParallel => "prefill_parallel",
            Op::DecodeParallel => "decode_parallel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Choreo,
    Baseline,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrefillCall {
    pub message: String,
    pub parents: Vec<MessageId>,
    /// Empty means every offset is defaulted; otherwise one entry per parent.
    pub offsets: Vec<Option<usize>>,
    pub new_offset: Option<usize>,
}

impl PrefillCall {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            ..Self::default()
        }
    }

    pub fn parents(mut self, parents: impl IntoIterator<Item = MessageId>) -> Self {
        self.parents = parents.into_iter().collect();
        self
    }

    pub fn offsets(mut self, offsets: impl IntoIterator<Item = Option<usize>>) -> Self {
        self.offsets = offsets.into_iter().collect();
        self
    }

    pub fn new_offset(mut self, offset: usize) -> Self {
        self.new_offset = Some(offset);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeCall {
    pub header: String,
    pub parents: Vec<MessageId>,
    pub offsets: Vec<Option<usize>>,
    pub new_offset: Option<usize>,
    pub sampling: SamplingParams,
    /// Teacher-forced output tokens. When set, generation emits exactly these
    /// tokens followed by EOS and `max_tokens` is ignored; logits are still
    /// computed at every step.
    pub force: Option<Vec<TokenId>>,
}

impl DecodeCall {
    pub fn new(header: impl Into<String>) -> Self {
        Self {
            header: header.into(),
            ..Self::default()
        }
    }

    pub fn parents(mut self, parents: impl IntoIterator<Item = MessageId>) -> Self {
        self.parents = parents.into_iter().collect();
        self
    }

    pub fn offsets(mut self, offsets: impl IntoIterator<Item = Option<usize>>) -> Self {
        self.offsets = offsets.into_iter().collect();
        self
    }

    pub fn new_offset(mut self, offset: usize) -> Self {
        self.new_offset = Some(offset);
        self
    }

    pub fn sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn max_tokens(mut self, n: usize) -> Self {
        self.sampling.max_tokens = n;
        self
    }

    pub fn force_text(mut self, text: &str) -> Self {
        self.force = Some(encode_bytes(text));
        self
    }

    pub fn force_tokens(mut self, tokens: Vec<TokenId>) -> Self {
        self.force = Some(tokens);
        self
    }

    /// Upper bound on generated tokens.
    pub fn budget(&self) -> usize {
        self.force.as_ref().map_or(self.sampling.max_tokens, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub id: MessageId,
    /// Generated tokens after the header, without EOS.
    pub tokens: Vec<TokenId>,
    /// Logits at each sampling point, in order. The first row is computed
    /// from the last header token.
    pub step_logits: Vec<Vec<f64>>,
    pub finish: FinishReason,
    #[serde(skip)]
    pub ttft: Option<Duration>,
}

impl DecodeOutput {
    pub fn text(&self) -> String {
        decode_content(&self.tokens)
    }
}

/// What an engine remembers about a message beyond its tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub id: MessageId,
    pub kind: MessageKind,
    pub header: Option<String>,
    pub parents: Vec<MessageId>,
    /// Resolved parent offsets at creation time.
    pub offsets: Vec<usize>,
    pub new_offset: usize,
}

/// The prefill/decode API shared by the choreographed and baseline engines.
pub trait Choreographer {
    fn kind(&self) -> EngineKind;

    fn config(&self) -> &ModelConfig;

    fn prefill(&mut self, call: PrefillCall) -> Result<MessageId>;

    fn prefill_parallel(&mut self, calls: Vec<PrefillCall>) -> Result<Vec<MessageId>>;

    fn decode(&mut self, call: DecodeCall) -> Result<DecodeOutput>;

    fn decode_parallel(&mut self, calls: Vec<DecodeCall>) -> Result<Vec<DecodeOutput>>;

    fn message_tokens(&self, id: MessageId) -> Result<Vec<TokenId>>;

    fn message_text(&self, id: MessageId) -> Result<String> {
        Ok(decode_content(&self.message_tokens(id)?))
    }

    fn message_count(&self) -> usize;

    fn cost_log(&self) -> &[CallCost];

    fn clear_cost_log(&mut self);
}

/// Resolve per-entry optional offsets. An omitted offset starts right after
/// the preceding parent (0 for the first); `new_offset` defaults to right
/// after the last-listed parent.
pub fn resolve_offsets(
    parents: &[MessageId],
    offsets: &[Option<usize>],
    new_offset: Option<usize>,
    len_of: impl Fn(MessageId) -> Result<usize>,
    window: usize,
) -> Result<(Vec<usize>, usize)> {
    if !offsets.is_empty() && offsets.len() != parents.len() {
        return Err(ChoreoError::OffsetsLengthMismatch {
            parents: parents.len(),
            offsets: offsets.len(),
        });
    }
    let mut resolved = Vec::with_capacity(parents.len());
    let mut cursor = 0;
    for (i, p) in parents.iter().enumerate() {
        if parents[..i].contains(p) {
            return Err(ChoreoError::DuplicateParent(*p));
        }
        let len = len_of(*p)?;
        let off = offsets.get(i).copied().flatten().unwrap_or(cursor);
        if off + len > window {
            return Err(ChoreoError::WindowOverflow {
                offset: off,
                length: len,
                window,
            });
        }
        resolved.push(off);
        cursor = off + len;
    }
    Ok((resolved, new_offset.unwrap_or(cursor)))
}

struct Plan {
    offsets: Vec<usize>,
    new_offset: usize,
}

#[derive(Debug, Clone)]
pub struct Engine<T: Scalar> {
    model: Arc<Model<T>>,
    cache: GlobalKvCache<T>,
    seed: u64,
    records: Vec<MessageRecord>,
    costs: Vec<CallCost>,
}

impl<T: Scalar> Engine<T> {
    pub fn new(model: Arc<Model<T>>, capacity: usize) -> Self {
        let cache = model.new_cache(capacity);
        let seed = model.config().seed;
        Self {
            model,
            cache,
            seed,
            records: Vec::new(),
            costs: Vec::new(),
        }
    }

    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        Ok(Self::new(Arc::new(Model::from_config(config)?), DEFAULT_CAPACITY))
    }

    /// Seed mixed into temperature sampling. Defaults to the model seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn model(&self) -> &Arc<Model<T>> {
        &self.model
    }

    pub fn cache(&self) -> &GlobalKvCache<T> {
        &self.cache
    }

    pub fn record(&self, id: MessageId) -> Result<&MessageRecord> {
        self.records.get(id.0).ok_or(ChoreoError::UnknownMessage(id))
    }

    /// Move a message without encoding anything.
    pub fn reposition(&mut self, id: MessageId, new_offset: usize) -> Result<usize> {
        self.cache.reposition_message(id, new_offset, self.model.rope())
    }

    fn plan_batch(
        &self,
        calls: &[CallShape<'_>],
    ) -> Result<Vec<Plan>> {
        if calls.is_empty() {
            return Err(ChoreoError::EmptyBatch);
        }
        let window = self.cache.window();
        let next = self.cache.next_message_id().0;
        let mut placed: BTreeMap<MessageId, usize> = BTreeMap::new();
        let mut plans = Vec::with_capacity(calls.len());
        let mut new_tokens = 0;
        for (parents, offsets, new_offset, extent) in calls {
            for p in parents.iter() {
                if p.0 >= next && p.0 < next + calls.len() {
                    return Err(ChoreoError::CrossBatchParent { parent: *p });
                }
            }
            let (offs, new_off) = resolve_offsets(
                parents,
                offsets,
                *new_offset,
                |p| self.cache.message_len(p),
                window,
            )?;
            for (p, o) in parents.iter().zip(&offs) {
                match placed.get(p) {
                    Some(first) if first != o => {
                        return Err(ChoreoError::ConflictingOffsets {
                            parent: *p,
                            first: *first,
                            second: *o,
                        })
                    }
                    _ => {
                        placed.insert(*p, *o);
                    }
                }
            }
            if new_off + extent > window {
                return Err(ChoreoError::WindowOverflow {
                    offset: new_off,
                    length: *extent,
                    window,
                });
            }
            new_tokens += extent;
            plans.push(Plan {
                offsets: offs,
                new_offset: new_off,
            });
        }
        let requested = self.cache.token_count() + new_tokens;
        if requested > self.cache.capacity() {
            return Err(ChoreoError::CapacityExceeded {
                requested,
                capacity: self.cache.capacity(),
            });
        }
        Ok(plans)
    }

    fn apply_positions(&mut self, parents: &[&[MessageId]], plans: &[Plan]) -> Result<u64> {
        let mut moved = 0;
        for (ps, plan) in parents.iter().zip(plans) {
            for (p, o) in ps.iter().zip(&plan.offsets) {
                if self.cache.message_offset(*p)? != *o {
                    moved += self.cache.message_len(*p)?;
                    self.cache.reposition_message(*p, *o, self.model.rope())?;
                }
            }
        }
        Ok(reposition_flops(self.model.config(), moved))
    }

    fn run_prefill(
        &mut self,
        calls: Vec<PrefillCall>,
        op: Op,
        want_logits: bool,
    ) -> Result<(Vec<MessageId>, PrefillLogits)> {
        let start = Instant::now();
        let framed: Vec<Vec<TokenId>> = calls.iter().map(|c| frame(&c.message)).collect();
        let shapes: Vec<_> = calls
            .iter()
            .zip(&framed)
            .map(|(c, f)| (c.parents.as_slice(), c.offsets.as_slice(), c.new_offset, f.len()))
            .collect();
        let plans = self.plan_batch(&shapes)?;
        let mut cost = CallCost::new(op);
        let parent_lists: Vec<&[MessageId]> = calls.iter().map(|c| c.parents.as_slice()).collect();
        cost.reposition_flops = self.apply_positions(&parent_lists, &plans)?;

        let mut ids = Vec::with_capacity(calls.len());
        let mut specs = Vec::with_capacity(calls.len());
        let mut batch = Vec::new();
        for ((call, plan), toks) in calls.iter().zip(&plans).zip(&framed) {
            let id = self.cache.register_message(MessageKind::Prefilled, plan.new_offset)?;
            self.records.push(MessageRecord {
                id,
                kind: MessageKind::Prefilled,
                header: None,
                parents: call.parents.clone(),
                offsets: plan.offsets.clone(),
                new_offset: plan.new_offset,
            });
            specs.push(VisibilitySpec::new(id, call.parents.iter().copied()));
            for (i, t) in toks.iter().enumerate() {
                batch.push(NewToken {
                    token: *t,
                    message: id,
                    position: plan.new_offset + i,
                    want_logits,
                });
            }
            ids.push(id);
        }
        let out = self.model.forward_step(
            CacheView {
                cache: &self.cache,
                specs: &specs,
            },
            &batch,
        )?;
        let n_logits = if want_logits { batch.len() } else { 0 };
        cost.prefill_flops = count_flops(self.model.config(), &out.context_lens, n_logits);
        cost.prefill_tokens = batch.len();
        self.cache.append_tokens(out.entries)?;

        let mut logits = Vec::new();
        if want_logits {
            let mut rows = out.logits.into_iter();
            for toks in &framed {
                logits.push(
                    rows.by_ref()
                        .take(toks.len())
                        .map(|r| r.unwrap().iter().map(|x| x.as_f64()).collect())
                        .collect(),
                );
            }
        }
        cost.wall = start.elapsed();
        self.costs.push(cost);
        Ok((ids, logits))
    }

    /// Parallel prefill that also returns per-token logits of each message.
    pub fn prefill_parallel_with_logits(
        &mut self,
        calls: Vec<PrefillCall>,
    ) -> Result<(Vec<MessageId>, PrefillLogits)> {
        self.run_prefill(calls, Op::PrefillParallel, true)
    }

    fn run_decode(&mut self, calls: Vec<DecodeCall>, op: Op) -> Result<Vec<DecodeOutput>> {
        let start = Instant::now();
        for c in &calls {
            if c.header.is_empty() {
                return Err(ChoreoError::EmptyHeader);
            }
            c.sampling.validate()?;
        }
        let headers: Vec<Vec<TokenId>> = calls.iter().map(|c| frame(&c.header)).collect();
        let shapes: Vec<_> = calls
            .iter()
            .zip(&headers)
            .map(|(c, h)| {
                (
                    c.parents.as_slice(),
                    c.offsets.as_slice(),
                    c.new_offset,
                    h.len() + c.budget(),
                )
            })
            .collect();
        let plans = self.plan_batch(&shapes)?;
        let mut cost = CallCost::new(op);
        let parent_lists: Vec<&[MessageId]> = calls.iter().map(|c| c.parents.as_slice()).collect();
        cost.reposition_flops = self.apply_positions(&parent_lists, &plans)?;

        let cfg = self.model.config().clone();
        let mut specs = Vec::with_capacity(calls.len());
        let mut states = Vec::with_capacity(calls.len());
        let mut batch = Vec::new();
        for ((call, plan), hdr) in calls.iter().zip(&plans).zip(&headers) {
            let id = self.cache.register_message(MessageKind::Decoded, plan.new_offset)?;
            self.records.push(MessageRecord {
                id,
                kind: MessageKind::Decoded,
                header: Some(call.header.clone()),
                parents: call.parents.clone(),
                offsets: plan.offsets.clone(),
                new_offset: plan.new_offset,
            });
            specs.push(VisibilitySpec::new(id, call.parents.iter().copied()));
            let budget = call.budget();
            for (i, t) in hdr.iter().enumerate() {
                batch.push(NewToken {
                    token: *t,
                    message: id,
                    position: plan.new_offset + i,
                    want_logits: i + 1 == hdr.len() && budget > 0,
                });
            }
            states.push(DecodeState::new(id, plan.new_offset + hdr.len(), budget));
        }
        let out = self.model.forward_step(
            CacheView {
                cache: &self.cache,
                specs: &specs,
            },
            &batch,
        )?;
        let n_logits = batch.iter().filter(|t| t.want_logits).count();
        cost.prefill_flops = count_flops(&cfg, &out.context_lens, n_logits);
        cost.prefill_tokens = batch.len();
        self.cache.append_tokens(out.entries)?;
        let mut rows = out.logits.into_iter().flatten();
        for (state, call) in states.iter_mut().zip(&calls) {
            if !state.done {
                let row = rows.next().expect("one logits row per active header");
                state.choose(row, call, self.seed);
            }
        }
        let ttft = start.elapsed();
        cost.ttft = Some(ttft);

        loop {
            let mut batch = Vec::new();
            let mut owners = Vec::new();
            for (k, s) in states.iter().enumerate() {
                if let Some(tok) = s.pending {
                    batch.push(NewToken {
                        token: tok,
                        message: s.id,
                        position: s.next_pos,
                        want_logits: !s.last,
                    });
                    owners.push(k);
                }
            }
            if batch.is_empty() {
                break;
            }
            let out = self.model.forward_step(
                CacheView {
                    cache: &self.cache,
                    specs: &specs,
                },
                &batch,
            )?;
            let n_logits = batch.iter().filter(|t| t.want_logits).count();
            cost.decode_flops += count_flops(&cfg, &out.context_lens, n_logits);
            cost.decode_tokens += batch.len();
            self.cache.append_tokens(out.entries)?;
            for (k, row) in owners.into_iter().zip(out.logits) {
                let s = &mut states[k];
                s.pending = None;
                s.next_pos += 1;
                if s.last {
                    s.done = true;
                    s.out.finish = FinishReason::MaxTokens;
                } else {
                    s.choose(row.expect("logits requested"), &calls[k], self.seed);
                }
            }
        }
        cost.wall = start.elapsed();
        self.costs.push(cost);
        Ok(states
            .into_iter()
            .map(|mut s| {
                s.out.ttft = Some(ttft);
                s.out
            })
            .collect())
    }
}

pub(crate) struct DecodeState {
    pub(crate) id: MessageId,
    pub(crate) next_pos: usize,
    pub(crate) pending: Option<TokenId>,
    /// The pending token is the last allowed one: encode it without logits.
    pub(crate) last: bool,
    pub(crate) out: DecodeOutput,
    pub(crate) done: bool,
}

impl DecodeState {
    pub(crate) fn new(id: MessageId, next_pos: usize, budget: usize) -> Self {
        Self {
            id,
            next_pos,
            pending: None,
            last: false,
            out: DecodeOutput {
                id,
                tokens: Vec::new(),
                step_logits: Vec::new(),
                finish: FinishReason::MaxTokens,
                ttft: None,
            },
            done: budget == 0,
        }
    }

    pub(crate) fn choose<T: Scalar>(&mut self, logits: Vec<T>, call: &DecodeCall, engine_seed: u64) {
        let logits: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
        let step = self.out.tokens.len();
        let tok = match &call.force {
            Some(f) => f.get(step).copied().unwrap_or(EOS_MSG),
            None => sample(&logits, &call.sampling, engine_seed, step),
        };
        self.out.step_logits.push(logits);
        if tok == EOS_MSG {
            self.done = true;
            self.out.finish = FinishReason::Eos;
            return;
        }
        self.out.tokens.push(tok);
        self.pending = Some(tok);
        self.last = call.force.is_none() && self.out.tokens.len() >= call.sampling.max_tokens;
    }
}

impl<T: Scalar> Choreographer for Engine<T> {
    fn kind(&self) -> EngineKind {
        EngineKind::Choreo
    }

    fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn prefill(&mut self, call: PrefillCall) -> Result<MessageId> {
        Ok(self.run_prefill(vec![call], Op::Prefill, false)?.0[0])
    }

    fn prefill_parallel(&mut self, calls: Vec<PrefillCall>) -> Result<Vec<MessageId>> {
        Ok(self.run_prefill(calls, Op::PrefillParallel, false)?.0)
    }

    fn decode(&mut self, call: DecodeCall) -> Result<DecodeOutput> {
        Ok(self.run_decode(vec![call], Op::Decode)?.remove(0))
    }

    fn decode_parallel(&mut self, calls: Vec<DecodeCall>) -> Result<Vec<DecodeOutput>> {
        self.run_decode(calls, Op::DecodeParallel)
    }

    fn message_tokens(&self, id: MessageId) -> Result<Vec<TokenId>> {
        self.cache.message_tokens(id)
    }

    fn message_count(&self) -> usize {
        self.cache.message_count()
    }

    fn cost_log(&self) -> &[CallCost] {
        &self.costs
    }

    fn clear_cost_log(&mut self) {
        self.costs.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine() -> Engine<f64> {
        Engine::from_config(&ModelConfig::tiny()).unwrap()
    }

    fn lens(ls: &[usize]) -> impl Fn(MessageId) -> Result<usize> + '_ {
        move |m| Ok(ls[m.0])
    }

    #[test]
    fn offsets_default_to_end_of_preceding_parent() {
        let (offs, new) = resolve_offsets(
            &[MessageId(0), MessageId(1)],
            &[],
            None,
            lens(&[4, 3]),
            100,
        )
        .unwrap();
        assert_eq!(offs, vec![0, 4]);
        assert_eq!(new, 7);

        let (offs, new) = resolve_offsets(
            &[MessageId(0), MessageId(1)],
            &[Some(10), None],
            None,
            lens(&[4, 3]),
            100,
        )
        .unwrap();
        assert_eq!(offs, vec![10, 14]);
        assert_eq!(new, 17);

        let (offs, new) = resolve_offsets(&[], &[], None, lens(&[]), 100).unwrap();
        assert!(offs.is_empty());
        assert_eq!(new, 0);
    }

    #[test]
    fn prefill_and_text_round_trip() {
        let mut e = engine();
        let a = e.prefill(PrefillCall::new("hello")).unwrap();
        assert_eq!(a, MessageId(0));
        assert_eq!(e.message_text(a).unwrap(), "hello");
        assert_eq!(e.cache().token_count(), 6);
        let out = e
            .decode(DecodeCall::new("Re:").parents([a]).max_tokens(5))
            .unwrap();
        assert_eq!(out.id, MessageId(1));
        assert!(e.message_text(out.id).unwrap().starts_with("Re:"));
        assert!(matches!(
            e.message_text(MessageId(9)),
            Err(ChoreoError::UnknownMessage(_))
        ));
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let mut e = engine();
        let a = e.prefill(PrefillCall::new("question")).unwrap();
        let mut e2 = e.clone();
        let call = DecodeCall::new("A:").parents([a]).max_tokens(12);
        let x = e.decode(call.clone()).unwrap();
        let y = e2.decode(call).unwrap();
        assert_eq!(x.tokens, y.tokens);
        assert_eq!(x.step_logits, y.step_logits);
    }

    #[test]
    fn forced_decode_emits_forced_then_eos() {
        let mut e = engine();
        let a = e.prefill(PrefillCall::new("q")).unwrap();
        let out = e
            .decode(DecodeCall::new("A:").parents([a]).force_text("xyz"))
            .unwrap();
        assert_eq!(out.text(), "xyz");
        assert_eq!(out.finish, FinishReason::Eos);
        assert_eq!(out.step_logits.len(), 4);
        assert_eq!(e.message_text(out.id).unwrap(), "A:xyz");
        assert_eq!(e.cache().message_len(out.id).unwrap(), 6);
    }

    #[test]
    fn max_tokens_bounds_generation() {
        let mut e = engine();
        let out = e.decode(DecodeCall::new("go").max_tokens(3)).unwrap();
        assert!(out.tokens.len() <= 3);
        if out.finish == FinishReason::MaxTokens {
            assert_eq!(out.tokens.len(), 3);
            assert_eq!(out.step_logits.len(), 3);
        }
        let zero = e.decode(DecodeCall::new("go").max_tokens(0)).unwrap();
        assert!(zero.tokens.is_empty());
        assert_eq!(e.cache().message_len(zero.id).unwrap(), 3);
    }

    #[test]
    fn branching_reuses_prefix() {
        let mut e = engine();
        let mut history = vec![e.prefill(PrefillCall::new("User: capital of China?")).unwrap()];
        history.push(
            e.decode(DecodeCall::new("Assistant:").parents(history.clone()).max_tokens(4))
                .unwrap()
                .id,
        );
        history.push(
            e.prefill(PrefillCall::new("User: Ethiopia?").parents(history.clone()))
                .unwrap(),
        );
        history.push(
            e.decode(DecodeCall::new("Assistant:").parents(history.clone()).max_tokens(4))
                .unwrap()
                .id,
        );
        history.pop();
        history.pop();
        let before = e.cache().token_count();
        let q = PrefillCall::new("User: Bolivia?");
        let qlen = frame(&q.message).len();
        history.push(e.prefill(q.parents(history.clone())).unwrap());
        assert_eq!(e.cache().token_count(), before + qlen);
    }
}
