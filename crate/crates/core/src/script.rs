//! Workflow scripts: a JSON list of engine calls that reference messages by
//! step name, so one script runs under either engine.
//!
//! ```json
//! {
//!   "name": "conversation",
//!   "sampling": {"mode": "greedy", "max_tokens": 16},
//!   "steps": [
//!     {"op": "prefill", "name": "user0", "content": "Hi"},
//!     {"op": "decode", "name": "reply0", "header": "Assistant:", "parents": ["user0"]},
//!     {"op": "decode_parallel", "calls": [
//!       {"name": "a", "header": "A:", "parents": ["user0"]},
//!       {"name": "b", "header": "B:", "parents": ["user0"], "force": "fixed text"}
//!     ]}
//!   ]
//! }
//! ```
//!
//! Trace files are JSONL: a header line naming the script and its sha256,
//! then one [`StepRecord`] per line.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{Choreographer, DecodeCall, EngineKind, Op, PrefillCall};
use crate::error::ChoreoError;
use crate::sampling::SamplingParams;
use crate::tokenizer::{decode_content, encode_bytes, TokenId};
use crate::workflows::{Recorder, StepRecord, WorkflowTrace};
use crate::MessageId;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("step {step:?}: {message}")]
    Invalid { step: String, message: String },
    #[error("step {step:?}: {source}")]
    Engine {
        step: String,
        #[source]
        source: ChoreoError,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CallSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offsets: Vec<Option<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_offset: Option<usize>,
    /// Overrides the script-level sampling for this call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingParams>,
    /// Teacher-forced output text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force: Option<String>,
    /// Teacher-forced output as raw token ids, for outputs that are not
    /// valid UTF-8. Takes precedence over `force`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_tokens: Option<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    Prefill(CallSpec),
    Decode(CallSpec),
    PrefillParallel { calls: Vec<CallSpec> },
    DecodeParallel { calls: Vec<CallSpec> },
}

impl Step {
    pub fn op(&self) -> Op {
        match self {
            Step::Prefill(_) => Op::Prefill,
            Step::Decode(_) => Op::Decode,
            Step::PrefillParallel { .. } => Op::PrefillParallel,
            Step::DecodeParallel { .. } => Op::DecodeParallel,
        }
    }

    pub fn calls(&self) -> &[CallSpec] {
        match self {
            Step::Prefill(c) | Step::Decode(c) => std::slice::from_ref(c),
            Step::PrefillParallel { calls } | Step::DecodeParallel { calls } => calls,
        }
    }

    fn is_decode(&self) -> bool {
        matches!(self, Step::Decode(_) | Step::DecodeParallel { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub name: String,
    #[serde(default)]
    pub sampling: SamplingParams,
    pub steps: Vec<Step>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let script: Script = serde_json::from_str(text).map_err(|e| ScriptError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        script.validate()?;
        Ok(script)
    }

    /// Names unique, parents name earlier steps, each call has the field
    /// its op needs.
    pub fn validate(&self) -> Result<(), ScriptError> {
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for (k, step) in self.steps.iter().enumerate() {
            let invalid = |step: &str, message: String| ScriptError::Invalid {
                step: step.to_string(),
                message,
            };
            if step.calls().is_empty() {
                return Err(invalid(&format!("#{k}"), "parallel step with no calls".into()));
            }
            let batch: Vec<&str> = step.calls().iter().map(|c| c.name.as_str()).collect();
            for call in step.calls() {
                if call.name.is_empty() {
                    return Err(invalid(&format!("#{k}"), "missing step name".into()));
                }
                if seen.contains_key(call.name.as_str())
                    || batch.iter().filter(|n| **n == call.name).count() > 1
                {
                    return Err(invalid(&call.name, "duplicate step name".into()));
                }
                if step.is_decode() && call.header.is_none() {
                    return Err(invalid(&call.name, "decode step needs a header".into()));
                }
                if !step.is_decode() && call.content.is_none() {
                    return Err(invalid(&call.name, "prefill step needs content".into()));
                }
                for p in &call.parents {
                    if batch.contains(&p.as_str()) {
                        return Err(invalid(&call.name, format!("parent {p:?} is in the same parallel batch")));
                    }
                    if !seen.contains_key(p.as_str()) {
                        return Err(invalid(&call.name, format!("parent {p:?} names no earlier step")));
                    }
                }
            }
            for n in batch {
                seen.insert(n, ());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    pub fn sha256(text: &str) -> String {
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Rebuild a script from a trace. With `force`, decode steps are forced
    /// to their recorded outputs; otherwise they generate under `sampling`.
    pub fn from_trace(trace: &WorkflowTrace, sampling: SamplingParams, force: bool) -> Self {
        let names: HashMap<MessageId, &str> = trace
            .steps
            .iter()
            .map(|s| (s.message_id, s.name.as_str()))
            .collect();
        fn forced(s: &StepRecord, force: bool) -> Option<&Vec<TokenId>> {
            s.generated.as_ref().filter(|_| force)
        }
        let exact_text = |g: &&Vec<TokenId>| encode_bytes(&decode_content(g)) == **g;
        let spec = |s: &StepRecord| CallSpec {
            name: s.name.clone(),
            content: s.generated.is_none().then(|| s.text.clone()),
            header: s.header.clone(),
            parents: s.parents.iter().map(|p| names[p].to_string()).collect(),
            offsets: s.offsets.clone(),
            new_offset: s.new_offset,
            sampling: None,
            force: forced(s, force).filter(|g| exact_text(g)).map(|g| decode_content(g)),
            force_tokens: forced(s, force).filter(|g| !exact_text(g)).cloned(),
        };
        let mut steps: Vec<Step> = Vec::new();
        for group in trace.steps.chunk_by(|a, b| a.call == b.call) {
            let calls: Vec<CallSpec> = group.iter().map(spec).collect();
            steps.push(match group[0].op {
                Op::Prefill => Step::Prefill(calls.into_iter().next().expect("one call")),
                Op::Decode => Step::Decode(calls.into_iter().next().expect("one call")),
                Op::PrefillParallel => Step::PrefillParallel { calls },
                Op::DecodeParallel => Step::DecodeParallel { calls },
            });
        }
        Script {
            name: trace.workflow.clone(),
            sampling,
            steps,
        }
    }
}

/// Execute a validated script, recording one trace step per call.
pub fn run_script(engine: &mut dyn Choreographer, script: &Script) -> Result<WorkflowTrace, ScriptError> {
    let mut ids: HashMap<String, MessageId> = HashMap::new();
    let mut rec = Recorder::new(engine, &script.name);
    for step in &script.steps {
        let calls = step.calls();
        let names: Vec<String> = calls.iter().map(|c| c.name.clone()).collect();
        let parents = |c: &CallSpec| -> Result<Vec<MessageId>, ScriptError> {
            c.parents
                .iter()
                .map(|p| {
                    ids.get(p).copied().ok_or_else(|| ScriptError::Invalid {
                        step: c.name.clone(),
                        message: format!("parent {p:?} names no earlier step"),
                    })
                })
                .collect()
        };
        let engine_err = |source| ScriptError::Engine {
            step: names.join(","),
            source,
        };
        let created: Vec<MessageId> = if step.is_decode() {
            let mut dc = Vec::with_capacity(calls.len());
            for c in calls {
                let mut call = DecodeCall::new(c.header.clone().unwrap_or_default())
                    .parents(parents(c)?)
                    .offsets(c.offsets.iter().copied())
                    .sampling(c.sampling.clone().unwrap_or_else(|| script.sampling.clone()));
                call.new_offset = c.new_offset;
                if let Some(t) = &c.force_tokens {
                    call = call.force_tokens(t.clone());
                } else if let Some(f) = &c.force {
                    call = call.force_text(f);
                }
                dc.push(call);
            }
            let outs = match step {
                Step::Decode(_) => vec![rec.decode(&names[0], dc.pop().expect("one call")).map_err(engine_err)?],
                _ => rec.decode_parallel(&names, dc).map_err(engine_err)?,
            };
            outs.into_iter().map(|o| o.id).collect()
        } else {
            let mut pc = Vec::with_capacity(calls.len());
            for c in calls {
                let mut call = PrefillCall::new(c.content.clone().unwrap_or_default())
                    .parents(parents(c)?)
                    .offsets(c.offsets.iter().copied());
                call.new_offset = c.new_offset;
                pc.push(call);
            }
            match step {
                Step::Prefill(_) => vec![rec.prefill(&names[0], pc.pop().expect("one call")).map_err(engine_err)?],
                _ => rec.prefill_parallel(&names, pc).map_err(engine_err)?,
            }
        };
        ids.extend(names.into_iter().zip(created));
    }
    Ok(rec.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub kind: String,
    pub script: String,
    pub script_sha256: String,
    pub engine: EngineKind,
}

/// Serialize a trace with its header line.
pub fn write_trace(trace: &WorkflowTrace, script_sha256: &str) -> String {
    let header = TraceHeader {
        kind: "header".into(),
        script: trace.workflow.clone(),
        script_sha256: script_sha256.to_string(),
        engine: trace.engine,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    for s in &trace.steps {
        out.push('\n');
        out.push_str(&serde_json::to_string(s).expect("step serializes"));
    }
    out.push('\n');
    out
}

pub fn read_trace(text: &str) -> Result<(TraceHeader, WorkflowTrace), ScriptError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |line: usize, e: serde_json::Error| ScriptError::Parse {
        line: line + 1,
        column: e.column(),
        message: e.to_string(),
    };
    let (n, first) = lines.next().ok_or(ScriptError::Parse {
        line: 1,
        column: 1,
        message: "empty trace".into(),
    })?;
    let header: TraceHeader = serde_json::from_str(first).map_err(|e| parse_err(n, e))?;
    if header.kind != "header" {
        return Err(ScriptError::Parse {
            line: n + 1,
            column: 1,
            message: "first line must be the trace header".into(),
        });
    }
    let steps = lines
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| parse_err(n, e)))
        .collect::<Result<_, _>>()?;
    let trace = WorkflowTrace {
        workflow: header.script.clone(),
        engine: header.engine,
        steps,
    };
    Ok((header, trace))
}
