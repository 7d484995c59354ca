//! Toy-scale reconstructions of multi-agent workflows, written once against
//! [`Choreographer`] so each runs under both engines.
//!
//! A toy model produces gibberish, so workflows draw their content from a
//! [`ContentSource`]: prompt texts and, optionally, teacher-forced outputs
//! for each decode step, keyed by step name. Forcing makes two engines emit
//! identical text, which is what cost comparisons and leakage tests need.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{Choreographer, DecodeCall, DecodeOutput, EngineKind, Op, PrefillCall};
use crate::error::Result;
use crate::sampling::SamplingParams;
use crate::tokenizer::{encode_bytes, TokenId};
use crate::MessageId;

pub mod bsm;
pub mod conversation;
pub mod maditer;
pub mod madpar;
pub mod multiqa;
pub mod tot;

pub use bsm::{run_bsm, BsmTopology};
pub use conversation::{run_branching, run_conversation, run_documents, Turn};
pub use maditer::{run_maditer, MadIterConfig};
pub use madpar::{run_madpar, MadParConfig};
pub use multiqa::{run_multiqa, MultiQaTopology};
pub use tot::{run_tot, TotConfig};

/// Synthetic content with lengths drawn uniformly from `min..=max` bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Synth {
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

/// Where prompt texts and decode outputs come from.
///
/// Lookup order for a key: explicit entry, then synthetic content (when
/// configured), then the workflow's default prompt or free generation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentSource {
    pub prompts: BTreeMap<String, String>,
    pub forced: BTreeMap<String, Vec<TokenId>>,
    pub synth: Option<Synth>,
    pub sampling: SamplingParams,
}

const SYNTH_WORDS: &[&str] = &[
    "the", "a", "of", "to", "and", "in", "is", "we", "so", "each", "sum", "two", "root", "odd",
    "prime", "hence", "let", "then", "area", "side", "angle", "value", "thus", "x", "y", "n",
];

impl ContentSource {
    /// Free generation with the given sampling parameters.
    pub fn free(sampling: SamplingParams) -> Self {
        Self {
            sampling,
            ..Self::default()
        }
    }

    /// Every prompt and output synthesized, lengths uniform in `min..=max`.
    pub fn synthetic(seed: u64, min_len: usize, max_len: usize) -> Self {
        Self {
            synth: Some(Synth {
                seed,
                min_len,
                max_len,
            }),
            ..Self::default()
        }
    }

    /// The benchmark convention: lengths uniform in 16..=128.
    pub fn bench(seed: u64) -> Self {
        Self::synthetic(seed, 16, 128)
    }

    pub fn with_prompt(mut self, key: &str, text: &str) -> Self {
        self.prompts.insert(key.to_string(), text.to_string());
        self
    }

    pub fn with_forced(mut self, key: &str, text: &str) -> Self {
        self.forced.insert(key.to_string(), encode_bytes(text));
        self
    }

    pub fn with_sampling(mut self, sampling: SamplingParams) -> Self {
        self.sampling = sampling;
        self
    }

    /// Replay a trace: every decode step is forced to its recorded output.
    pub fn from_trace(trace: &WorkflowTrace) -> Self {
        let mut s = Self::default();
        for step in &trace.steps {
            if let Some(g) = &step.generated {
                s.forced.insert(step.name.clone(), g.clone());
            }
            if step.generated.is_none() {
                s.prompts.insert(step.name.clone(), step.text.clone());
            }
        }
        s
    }

    fn rng(&self, key: &str) -> Option<ChaCha8Rng> {
        let synth = self.synth?;
        let mut h = Sha256::new();
        h.update(synth.seed.to_le_bytes());
        h.update(key.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        Some(ChaCha8Rng::from_seed(seed))
    }

    fn synth_text(&self, key: &str) -> Option<String> {
        let synth = self.synth?;
        let mut rng = self.rng(key)?;
        let len = rng.random_range(synth.min_len..=synth.max_len.max(synth.min_len));
        let mut text = String::with_capacity(len + 8);
        while text.len() < len {
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(SYNTH_WORDS[rng.random_range(0..SYNTH_WORDS.len())]);
        }
        text.truncate(len);
        Some(text)
    }

    /// Deterministic choice in `0..n` for a key, when synthesizing.
    pub fn synth_index(&self, key: &str, n: usize) -> Option<usize> {
        let mut rng = self.rng(&format!("{key}#index"))?;
        Some(rng.random_range(0..n.max(1)))
    }

    /// Prefill text for a prompt key.
    pub fn prompt(&self, key: &str, default: &str) -> String {
        if let Some(p) = self.prompts.get(key) {
            return p.clone();
        }
        self.synth_text(key).unwrap_or_else(|| default.to_string())
    }

    /// Forced output for a decode step, if any.
    pub fn forced(&self, key: &str) -> Option<Vec<TokenId>> {
        if let Some(f) = self.forced.get(key) {
            return Some(f.clone());
        }
        self.synth_text(key).map(|t| encode_bytes(&t))
    }

    /// Forced output that must begin with `marker` when synthesized.
    pub fn forced_with_marker(&self, key: &str, marker: &str) -> Option<Vec<TokenId>> {
        if let Some(f) = self.forced.get(key) {
            return Some(f.clone());
        }
        self.synth_text(key)
            .map(|t| encode_bytes(&format!("{marker} {t}")))
    }

    /// A decode call for step `key`, forced when this source says so.
    pub fn decode_call(&self, key: &str, header: &str) -> DecodeCall {
        let mut call = DecodeCall::new(header).sampling(self.sampling.clone());
        call.force = self.forced(key);
        call
    }
}

/// One executed step of a workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub op: Op,
    /// Index of the engine call; calls of one parallel batch share it.
    pub call: usize,
    pub message_id: MessageId,
    pub token_count: usize,
    pub parents: Vec<MessageId>,
    pub offsets: Vec<Option<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_offset: Option<usize>,
    /// Full message text; for decode steps, header followed by output.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<String>,
    /// Generated tokens of a decode step, excluding header and EOS.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowTrace {
    pub workflow: String,
    pub engine: EngineKind,
    pub steps: Vec<StepRecord>,
}

impl WorkflowTrace {
    pub fn step(&self, name: &str) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.name == name)
    }

    pub fn decode_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(|s| s.generated.is_some())
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("step serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Runs engine calls and records each as a trace step.
pub struct Recorder<'a> {
    engine: &'a mut dyn Choreographer,
    trace: WorkflowTrace,
    record_logits: bool,
    calls: usize,
}

impl<'a> Recorder<'a> {
    pub fn new(engine: &'a mut dyn Choreographer, workflow: &str) -> Self {
        let kind = engine.kind();
        Self {
            engine,
            trace: WorkflowTrace {
                workflow: workflow.to_string(),
                engine: kind,
                steps: Vec::new(),
            },
            record_logits: true,
            calls: 0,
        }
    }

    pub fn record_logits(mut self, on: bool) -> Self {
        self.record_logits = on;
        self
    }

    pub fn engine(&mut self) -> &mut dyn Choreographer {
        self.engine
    }

    pub fn text(&self, id: MessageId) -> Result<String> {
        self.engine.message_text(id)
    }

    fn push_prefill(&mut self, name: String, op: Op, id: MessageId, call: PrefillCall) -> Result<()> {
        self.trace.steps.push(StepRecord {
            name,
            op,
            call: self.calls,
            message_id: id,
            token_count: self.engine.message_tokens(id)?.len(),
            parents: call.parents,
            offsets: call.offsets,
            new_offset: call.new_offset,
            text: call.message,
            header: None,
            generated: None,
            logits: None,
        });
        Ok(())
    }

    fn push_decode(&mut self, name: String, op: Op, out: &DecodeOutput, call: DecodeCall) -> Result<()> {
        self.trace.steps.push(StepRecord {
            name,
            op,
            call: self.calls,
            message_id: out.id,
            token_count: self.engine.message_tokens(out.id)?.len(),
            parents: call.parents,
            offsets: call.offsets,
            new_offset: call.new_offset,
            text: self.engine.message_text(out.id)?,
            header: Some(call.header),
            generated: Some(out.tokens.clone()),
            logits: self.record_logits.then(|| out.step_logits.clone()),
        });
        Ok(())
    }

    pub fn prefill(&mut self, name: &str, call: PrefillCall) -> Result<MessageId> {
        let id = self.engine.prefill(call.clone())?;
        self.push_prefill(name.to_string(), Op::Prefill, id, call)?;
        self.calls += 1;
        Ok(id)
    }

    pub fn prefill_parallel(&mut self, names: &[String], calls: Vec<PrefillCall>) -> Result<Vec<MessageId>> {
        let ids = self.engine.prefill_parallel(calls.clone())?;
        for ((name, id), call) in names.iter().zip(&ids).zip(calls) {
            self.push_prefill(name.clone(), Op::PrefillParallel, *id, call)?;
        }
        self.calls += 1;
        Ok(ids)
    }

    pub fn decode(&mut self, name: &str, call: DecodeCall) -> Result<DecodeOutput> {
        let out = self.engine.decode(call.clone())?;
        self.push_decode(name.to_string(), Op::Decode, &out, call)?;
        self.calls += 1;
        Ok(out)
    }

    pub fn decode_parallel(&mut self, names: &[String], calls: Vec<DecodeCall>) -> Result<Vec<DecodeOutput>> {
        let outs = self.engine.decode_parallel(calls.clone())?;
        for ((name, out), call) in names.iter().zip(&outs).zip(calls) {
            self.push_decode(name.clone(), Op::DecodeParallel, out, call)?;
        }
        self.calls += 1;
        Ok(outs)
    }

    pub fn finish(self) -> WorkflowTrace {
        self.trace
    }
}

/// Index following the first occurrence of `marker` when it parses as a
/// number below `n`.
pub fn parse_marker_index(text: &str, marker: &str, n: usize) -> Option<usize> {
    let at = text.find(marker)? + marker.len();
    let digits: String = text[at..].chars().take_while(char::is_ascii_digit).collect();
    digits.parse().ok().filter(|k| *k < n)
}

/// Majority over parsed votes; ties go to the lowest index, no valid vote
/// means index 0.
pub fn majority(votes: impl IntoIterator<Item = Option<usize>>, n: usize) -> usize {
    let mut counts = vec![0usize; n.max(1)];
    for v in votes.into_iter().flatten() {
        if v < counts.len() {
            counts[v] += 1;
        }
    }
    let mut best = 0;
    for (i, c) in counts.iter().enumerate() {
        if *c > counts[best] {
            best = i;
        }
    }
    best
}
