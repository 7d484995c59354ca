//! Parallel multi-agent debate: each round decodes every agent at once, each
//! attending to the question and the other agents' previous-round messages.
//!
//! A parent shared by several calls of one batch must sit at one offset, so
//! previous-round messages get fixed slots after the question. Agent `i`
//! lists every slot except its own, which leaves a gap where its own message
//! would be.

use serde::{Deserialize, Serialize};

use crate::engine::{Choreographer, PrefillCall};
use crate::error::{ChoreoError, Result};
use crate::workflows::{ContentSource, Recorder, WorkflowTrace};
use crate::MessageId;

pub const CONSENSUS_MARKER: &str = "ANSWER=";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadParConfig {
    pub question: String,
    pub agents: usize,
    pub rounds: usize,
}

impl MadParConfig {
    pub fn new(question: &str, agents: usize, rounds: usize) -> Self {
        Self {
            question: question.to_string(),
            agents,
            rounds,
        }
    }
}

pub fn run_madpar(
    engine: &mut dyn Choreographer,
    cfg: &MadParConfig,
    source: &ContentSource,
) -> Result<WorkflowTrace> {
    if cfg.agents < 2 || cfg.rounds == 0 {
        return Err(ChoreoError::InvalidConfig("madpar needs two agents and one round".into()));
    }
    let mut rec = Recorder::new(engine, "madpar");
    let sys = rec.prefill(
        "sys.debate",
        PrefillCall::new(source.prompt(
            "sys.debate",
            "Debate the problem with the other agents and state ANSWER=n.",
        )),
    )?;
    let q = rec.prefill("question", PrefillCall::new(source.prompt("question", &cfg.question)))?;
    let len = |rec: &mut Recorder<'_>, id: MessageId| rec.engine().message_tokens(id).map(|t| t.len());
    let base = len(&mut rec, sys)? + len(&mut rec, q)?;
    let sys_len = len(&mut rec, sys)?;

    let mut context: Vec<MessageId> = Vec::new();
    for r in 0..cfg.rounds {
        let mut slots = Vec::with_capacity(context.len());
        let mut cursor = base;
        for m in &context {
            slots.push(cursor);
            cursor += len(&mut rec, *m)?;
        }
        let names: Vec<String> = (0..cfg.agents).map(|i| format!("r{r}.agent{i}")).collect();
        let calls = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let call = source.decode_call(n, &format!("Agent {i}:"));
                if context.is_empty() {
                    return call.parents([sys, q]);
                }
                let mut parents = vec![sys, q];
                let mut offsets = vec![Some(0), Some(sys_len)];
                for (j, m) in context.iter().enumerate() {
                    if i != j {
                        parents.push(*m);
                        offsets.push(Some(slots[j]));
                    }
                }
                call.parents(parents).offsets(offsets).new_offset(cursor)
            })
            .collect();
        context = rec
            .decode_parallel(&names, calls)?
            .into_iter()
            .map(|o| o.id)
            .collect();
    }
    Ok(rec.finish())
}

/// Majority over `ANSWER=n` markers in the final round; ties and missing
/// markers resolve as in vote parsing.
pub fn parse_consensus(texts: &[String], n_choices: usize) -> usize {
    crate::workflows::majority(
        texts
            .iter()
            .map(|t| crate::workflows::parse_marker_index(t, CONSENSUS_MARKER, n_choices)),
        n_choices,
    )
}
