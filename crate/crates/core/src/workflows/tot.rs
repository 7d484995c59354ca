//! Depth-1 tree of thoughts: candidate solutions decoded in parallel, voters
//! decoded in parallel over all candidates, then a final solution that sees
//! only the winning candidate.
//!
//! A vote names its choice with `BEST=k`; the first marker in a vote counts.

use serde::{Deserialize, Serialize};

use crate::engine::{Choreographer, PrefillCall};
use crate::error::{ChoreoError, Result};
use crate::workflows::{majority, parse_marker_index, ContentSource, Recorder, WorkflowTrace};

pub const VOTE_MARKER: &str = "BEST=";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotConfig {
    pub question: String,
    pub branches: usize,
    pub voters: usize,
}

impl TotConfig {
    pub fn new(question: &str, branches: usize, voters: usize) -> Self {
        Self {
            question: question.to_string(),
            branches,
            voters,
        }
    }
}

pub fn run_tot(
    engine: &mut dyn Choreographer,
    cfg: &TotConfig,
    source: &ContentSource,
) -> Result<WorkflowTrace> {
    if cfg.branches == 0 || cfg.voters == 0 {
        return Err(ChoreoError::InvalidConfig("tot needs at least one branch and one voter".into()));
    }
    let mut rec = Recorder::new(engine, "tot");
    let sys_cot = rec.prefill(
        "sys.cot",
        PrefillCall::new(source.prompt("sys.cot", "Think step by step and solve the problem.")),
    )?;
    let sys_vote = rec.prefill(
        "sys.vote",
        PrefillCall::new(source.prompt(
            "sys.vote",
            "Pick the best candidate solution. Reply with BEST=k.",
        )),
    )?;
    let sys_solve = rec.prefill(
        "sys.solve",
        PrefillCall::new(source.prompt("sys.solve", "Give the final answer.")),
    )?;
    let q = rec.prefill("question", PrefillCall::new(source.prompt("question", &cfg.question)))?;

    let names: Vec<String> = (0..cfg.branches).map(|i| format!("cot{i}")).collect();
    let calls = names
        .iter()
        .map(|n| source.decode_call(n, "Assistant:").parents([sys_cot, q]))
        .collect();
    let cots: Vec<_> = rec.decode_parallel(&names, calls)?.into_iter().map(|o| o.id).collect();

    let names: Vec<String> = (0..cfg.voters).map(|i| format!("vote{i}")).collect();
    let calls = names
        .iter()
        .map(|n| {
            let mut call = source
                .decode_call(n, "Assistant:")
                .parents([sys_vote, q].into_iter().chain(cots.iter().copied()));
            if source.synth.is_some() && !source.forced.contains_key(n) {
                let k = source.synth_index(n, cfg.branches).unwrap_or(0);
                call.force = source.forced_with_marker(n, &format!("{VOTE_MARKER}{k}"));
            }
            call
        })
        .collect();
    let votes = rec.decode_parallel(&names, calls)?;
    let parsed = votes
        .iter()
        .map(|v| parse_marker_index(&v.text(), VOTE_MARKER, cfg.branches))
        .collect::<Vec<_>>();
    let winner = majority(parsed, cfg.branches);

    rec.decode(
        "solve",
        source
            .decode_call("solve", "Assistant:")
            .parents([sys_solve, q, cots[winner]]),
    )?;
    Ok(rec.finish())
}
