//! The naive reference engine.
//!
//! A message id refers only to a token sequence. `prefill` stores the framed
//! message and ignores its parents. `decode` concatenates the parents' tokens
//! and the framed header into one prompt at positions `0..`, encodes it with
//! an ordinary causal mask and generates. Offsets are ignored.
//!
//! A prefix cache skips re-encoding any prompt prefix seen earlier in the
//! workflow. Within one `decode_parallel` call every prompt is looked up
//! against the cache as it stood when the call began, and the whole batch is
//! inserted afterwards, as a batched prefill would.

use std::sync::Arc;
use std::time::Instant;

use crate::cost::{count_flops, CallCost};
use crate::engine::{
    Choreographer, DecodeCall, DecodeOutput, DecodeState, EngineKind, Op, PrefillCall,
};
use crate::error::{ChoreoError, Result};
use crate::kv_cache::{GlobalKvCache, KvEntry, MessageKind};
use crate::masking::VisibilitySpec;
use crate::model::{CacheView, Model, ModelConfig, NewToken};
use crate::prefix_cache::PrefixCache;
use crate::tensor::Scalar;
use crate::tokenizer::{frame, TokenId};
use crate::MessageId;

#[derive(Debug, Clone)]
struct StoredMessage {
    tokens: Vec<TokenId>,
    kind: MessageKind,
}

#[derive(Debug, Clone)]
pub struct BaselineEngine<T: Scalar> {
    model: Arc<Model<T>>,
    messages: Vec<StoredMessage>,
    prefix: PrefixCache<T>,
    prefix_enabled: bool,
    seed: u64,
    costs: Vec<CallCost>,
}

/// One prompt being decoded in its own scratch cache.
struct Session<T: Scalar> {
    scratch: GlobalKvCache<T>,
    spec: [VisibilitySpec; 1],
    prompt: Vec<TokenId>,
    logits: Vec<Option<Vec<T>>>,
    state: DecodeState,
}

impl<T: Scalar> BaselineEngine<T> {
    pub fn new(model: Arc<Model<T>>) -> Self {
        let seed = model.config().seed;
        Self {
            model,
            messages: Vec::new(),
            prefix: PrefixCache::new(),
            prefix_enabled: true,
            seed,
            costs: Vec::new(),
        }
    }

    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        Ok(Self::new(Arc::new(Model::from_config(config)?)))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_prefix_cache(mut self, enabled: bool) -> Self {
        self.prefix_enabled = enabled;
        self
    }

    pub fn prefix_cache_enabled(&self) -> bool {
        self.prefix_enabled
    }

    pub fn clear_prefix_cache(&mut self) {
        self.prefix.clear();
    }

    pub fn prefix_cache(&self) -> &PrefixCache<T> {
        &self.prefix
    }

    pub fn message_kind(&self, id: MessageId) -> Result<MessageKind> {
        self.messages
            .get(id.0)
            .map(|m| m.kind)
            .ok_or(ChoreoError::UnknownMessage(id))
    }

    /// The prompt a decode would encode: parents in listed order, then the
    /// framed header.
    pub fn build_prompt(&self, header: &str, parents: &[MessageId]) -> Result<Vec<TokenId>> {
        let mut prompt = Vec::new();
        for p in parents {
            let m = self.messages.get(p.0).ok_or(ChoreoError::UnknownMessage(*p))?;
            prompt.extend_from_slice(&m.tokens);
        }
        prompt.extend(frame(header));
        Ok(prompt)
    }

    fn start(&self, call: &DecodeCall, cost: &mut CallCost) -> Result<Session<T>> {
        let prompt = self.build_prompt(&call.header, &call.parents)?;
        let n = prompt.len();
        let budget = call.budget();
        let cfg = self.model.config();
        let mut scratch = self.model.new_cache(n + budget);
        let id = scratch.register_message(MessageKind::Decoded, 0)?;
        let spec = [VisibilitySpec::new(id, [])];
        let need_logits = budget > 0;

        let empty = PrefixCache::new();
        let hit = if self.prefix_enabled {
            self.prefix.lookup(&prompt)
        } else {
            empty.lookup(&[])
        };
        let mut reuse = hit.len();
        let mut logits: Vec<Option<Vec<T>>> = vec![None; n];
        if reuse == n && need_logits {
            match hit.last_logits {
                Some(l) => logits[n - 1] = Some(l.to_vec()),
                None => reuse = n - 1,
            }
        }
        scratch.append_tokens(
            hit.entries[..reuse]
                .iter()
                .enumerate()
                .map(|(j, (k, v))| KvEntry {
                    token: prompt[j],
                    message: id,
                    position: j,
                    keys: k.to_vec(),
                    values: v.to_vec(),
                })
                .collect(),
        )?;
        cost.cache_hit_tokens += reuse;
        if reuse < n {
            let batch: Vec<NewToken> = (reuse..n)
                .map(|j| NewToken {
                    token: prompt[j],
                    message: id,
                    position: j,
                    want_logits: j + 1 == n && need_logits,
                })
                .collect();
            let out = self.model.forward_step(
                CacheView {
                    cache: &scratch,
                    specs: &spec,
                },
                &batch,
            )?;
            cost.prefill_flops += count_flops(cfg, &out.context_lens, usize::from(need_logits));
            cost.prefill_tokens += batch.len();
            scratch.append_tokens(out.entries)?;
            if need_logits {
                logits[n - 1] = out.logits.into_iter().last().flatten();
            }
        }
        let mut state = DecodeState::new(id, n, budget);
        if need_logits {
            state.choose(logits[n - 1].clone().expect("last prompt logits"), call, self.seed);
        }
        Ok(Session {
            scratch,
            spec,
            prompt,
            logits,
            state,
        })
    }

    fn generate(&self, s: &mut Session<T>, call: &DecodeCall, cost: &mut CallCost) -> Result<()> {
        while let Some(tok) = s.state.pending.take() {
            let batch = [NewToken {
                token: tok,
                message: s.state.id,
                position: s.state.next_pos,
                want_logits: !s.state.last,
            }];
            let out = self.model.forward_step(
                CacheView {
                    cache: &s.scratch,
                    specs: &s.spec,
                },
                &batch,
            )?;
            cost.decode_flops +=
                count_flops(self.model.config(), &out.context_lens, usize::from(!s.state.last));
            cost.decode_tokens += 1;
            s.scratch.append_tokens(out.entries)?;
            s.state.next_pos += 1;
            let row = out.logits.into_iter().next().flatten();
            s.logits.push(row.clone());
            if s.state.last {
                s.state.done = true;
            } else {
                s.state.choose(row.expect("logits requested"), call, self.seed);
            }
        }
        Ok(())
    }

    fn finish(&mut self, s: Session<T>) -> DecodeOutput {
        let mut tokens = s.prompt;
        tokens.extend_from_slice(&s.state.out.tokens);
        if self.prefix_enabled {
            let (keys, values): (Vec<_>, Vec<_>) =
                (0..s.scratch.token_count()).map(|i| s.scratch.token_kv(i)).unzip();
            self.prefix.insert(&tokens, &keys, &values, &s.logits);
        }
        s.state.out
    }

    fn run_decode(&mut self, calls: Vec<DecodeCall>, op: Op) -> Result<Vec<DecodeOutput>> {
        let start = Instant::now();
        if calls.is_empty() {
            return Err(ChoreoError::EmptyBatch);
        }
        let window = self.model.config().context_window;
        for c in &calls {
            if c.header.is_empty() {
                return Err(ChoreoError::EmptyHeader);
            }
            c.sampling.validate()?;
            let n = self.build_prompt(&c.header, &c.parents)?.len();
            if n + c.budget() > window {
                return Err(ChoreoError::WindowOverflow {
                    offset: 0,
                    length: n + c.budget(),
                    window,
                });
            }
        }
        let mut cost = CallCost::new(op);
        let mut sessions = Vec::with_capacity(calls.len());
        for c in &calls {
            sessions.push(self.start(c, &mut cost)?);
        }
        let ttft = start.elapsed();
        cost.ttft = Some(ttft);
        for (s, c) in sessions.iter_mut().zip(&calls) {
            self.generate(s, c, &mut cost)?;
        }
        let mut outs = Vec::with_capacity(calls.len());
        for (s, c) in sessions.into_iter().zip(&calls) {
            let header = frame(&c.header);
            let mut stored = header;
            stored.extend_from_slice(&s.state.out.tokens);
            let id = MessageId(self.messages.len());
            self.messages.push(StoredMessage {
                tokens: stored,
                kind: MessageKind::Decoded,
            });
            let mut out = self.finish(s);
            out.id = id;
            out.ttft = Some(ttft);
            outs.push(out);
        }
        cost.wall = start.elapsed();
        self.costs.push(cost);
        Ok(outs)
    }

    fn store_prefills(&mut self, calls: Vec<PrefillCall>, op: Op) -> Vec<MessageId> {
        let start = Instant::now();
        let ids = calls
            .into_iter()
            .map(|c| {
                self.messages.push(StoredMessage {
                    tokens: frame(&c.message),
                    kind: MessageKind::Prefilled,
                });
                MessageId(self.messages.len() - 1)
            })
            .collect();
        let mut cost = CallCost::new(op);
        cost.wall = start.elapsed();
        self.costs.push(cost);
        ids
    }
}

impl<T: Scalar> Choreographer for BaselineEngine<T> {
    fn kind(&self) -> EngineKind {
        EngineKind::Baseline
    }

    fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn prefill(&mut self, call: PrefillCall) -> Result<MessageId> {
        Ok(self.store_prefills(vec![call], Op::Prefill)[0])
    }

    fn prefill_parallel(&mut self, calls: Vec<PrefillCall>) -> Result<Vec<MessageId>> {
        if calls.is_empty() {
            return Err(ChoreoError::EmptyBatch);
        }
        Ok(self.store_prefills(calls, Op::PrefillParallel))
    }

    fn decode(&mut self, call: DecodeCall) -> Result<DecodeOutput> {
        Ok(self.run_decode(vec![call], Op::Decode)?.remove(0))
    }

    fn decode_parallel(&mut self, calls: Vec<DecodeCall>) -> Result<Vec<DecodeOutput>> {
        self.run_decode(calls, Op::DecodeParallel)
    }

    fn message_tokens(&self, id: MessageId) -> Result<Vec<TokenId>> {
        self.messages
            .get(id.0)
            .map(|m| m.tokens.clone())
            .ok_or(ChoreoError::UnknownMessage(id))
    }

    fn message_count(&self) -> usize {
        self.messages.len()
    }

    fn cost_log(&self) -> &[CallCost] {
        &self.costs
    }

    fn clear_cost_log(&mut self) {
        self.costs.clear();
    }
}
