//! A growing conversational history, backtracking to branch it, and
//! retrieval over precomputed document encodings.

use crate::engine::{Choreographer, PrefillCall};
use crate::error::{ChoreoError, Result};
use crate::workflows::{ContentSource, Recorder, WorkflowTrace};
use crate::MessageId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub user: String,
    /// Decode an assistant reply after this user message.
    pub reply: bool,
}

impl Turn {
    pub fn new(user: &str) -> Self {
        Self {
            user: user.to_string(),
            reply: true,
        }
    }

    pub fn without_reply(user: &str) -> Self {
        Self {
            user: user.to_string(),
            reply: false,
        }
    }
}

fn converse(
    rec: &mut Recorder<'_>,
    history: &mut Vec<MessageId>,
    turns: &[Turn],
    source: &ContentSource,
    first: usize,
) -> Result<()> {
    for (k, turn) in turns.iter().enumerate() {
        let k = first + k;
        let name = format!("user{k}");
        let text = source.prompt(&name, &turn.user);
        history.push(rec.prefill(&name, PrefillCall::new(text).parents(history.clone()))?);
        if turn.reply {
            let name = format!("assistant{k}");
            let call = source.decode_call(&name, "Assistant:").parents(history.clone());
            history.push(rec.decode(&name, call)?.id);
        }
    }
    Ok(())
}

/// Alternate user prefills and assistant decodes, each attending to the
/// whole history so far.
pub fn run_conversation(
    engine: &mut dyn Choreographer,
    turns: &[Turn],
    source: &ContentSource,
) -> Result<WorkflowTrace> {
    if turns.is_empty() {
        return Err(ChoreoError::EmptyBatch);
    }
    let mut rec = Recorder::new(engine, "conversation");
    let mut history = Vec::new();
    converse(&mut rec, &mut history, turns, source, 0)?;
    Ok(rec.finish())
}

/// Run `turns`, pop the last user/assistant pair and continue from the
/// earlier prefix with `branch`.
pub fn run_branching(
    engine: &mut dyn Choreographer,
    turns: &[Turn],
    branch: &Turn,
    source: &ContentSource,
) -> Result<WorkflowTrace> {
    if turns.len() < 2 || !turns.last().is_some_and(|t| t.reply) {
        return Err(ChoreoError::InvalidConfig(
            "branching needs at least two turns, the last with a reply".into(),
        ));
    }
    let mut rec = Recorder::new(engine, "branching");
    let mut history = Vec::new();
    converse(&mut rec, &mut history, turns, source, 0)?;
    history.pop();
    history.pop();
    converse(
        &mut rec,
        &mut history,
        std::slice::from_ref(branch),
        source,
        turns.len(),
    )?;
    Ok(rec.finish())
}

/// Encode every document once, in parallel and without parents; answer a
/// question from the retrieved subset placed back to back.
pub fn run_documents(
    engine: &mut dyn Choreographer,
    docs: &[String],
    question: &str,
    retrieved: &[usize],
    source: &ContentSource,
) -> Result<WorkflowTrace> {
    let mut rec = Recorder::new(engine, "documents");
    let names: Vec<String> = (0..docs.len()).map(|i| format!("doc{i}")).collect();
    let calls = docs
        .iter()
        .zip(&names)
        .map(|(d, n)| PrefillCall::new(source.prompt(n, &format!("Source Document: {d}"))))
        .collect();
    let doc_ids = rec.prefill_parallel(&names, calls)?;
    let q = rec.prefill("question", PrefillCall::new(source.prompt("question", question)))?;
    let mut parents = Vec::with_capacity(retrieved.len() + 1);
    for &i in retrieved {
        parents.push(*doc_ids.get(i).ok_or(ChoreoError::UnknownMessage(MessageId(i)))?);
    }
    parents.push(q);
    rec.decode("answer", source.decode_call("answer", "Assistant:").parents(parents))?;
    Ok(rec.finish())
}
