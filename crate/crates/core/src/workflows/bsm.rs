//! Branch-solve-merge for constrained story writing: a branch step splits
//! the concepts, two solve steps write sub-stories in parallel, and a merge
//! step combines them.
//!
//! Each solve call has its own system prompt. Both solves share the task and
//! branch messages, which must then sit at one offset for both; the two
//! system prompts are right-aligned to end where the task begins.

use serde::{Deserialize, Serialize};

use crate::engine::{Choreographer, PrefillCall};
use crate::error::{ChoreoError, Result};
use crate::workflows::{ContentSource, Recorder, WorkflowTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BsmTopology {
    /// Sub-stories back to back in the merge prompt.
    Serial,
    /// Sub-stories overlapped at one offset.
    Parallel,
}

pub fn run_bsm(
    engine: &mut dyn Choreographer,
    concepts: &[&str],
    topology: BsmTopology,
    source: &ContentSource,
) -> Result<WorkflowTrace> {
    if concepts.len() < 2 {
        return Err(ChoreoError::InvalidConfig("bsm needs at least two concepts".into()));
    }
    let mut rec = Recorder::new(engine, "bsm");
    let sys_branch = rec.prefill(
        "sys.branch",
        PrefillCall::new(source.prompt("sys.branch", "Split the concepts into two groups.")),
    )?;
    let sys_solve: Vec<_> = ["a", "b"]
        .iter()
        .map(|g| {
            let key = format!("sys.solve.{g}");
            let text = source.prompt(&key, &format!("Write a short story using group {g}."));
            rec.prefill(&key, PrefillCall::new(text))
        })
        .collect::<Result<_>>()?;
    let sys_merge = rec.prefill(
        "sys.merge",
        PrefillCall::new(source.prompt("sys.merge", "Merge the two stories into one.")),
    )?;
    let task = rec.prefill(
        "task",
        PrefillCall::new(source.prompt("task", &format!("Concepts: {}", concepts.join(", ")))),
    )?;
    let branch = rec.decode(
        "branch",
        source.decode_call("branch", "Groups:").parents([sys_branch, task]),
    )?;

    let lens: Vec<usize> = sys_solve
        .iter()
        .map(|id| rec.engine().message_tokens(*id).map(|t| t.len()))
        .collect::<Result<_>>()?;
    let task_at = lens.iter().copied().max().unwrap_or(0);
    let task_len = rec.engine().message_tokens(task)?.len();
    let names = vec!["solve.a".to_string(), "solve.b".to_string()];
    let calls = names
        .iter()
        .zip(sys_solve.iter().zip(&lens))
        .map(|(n, (sys, len))| {
            source
                .decode_call(n, "Story:")
                .parents([*sys, task, branch.id])
                .offsets([Some(task_at - len), Some(task_at), Some(task_at + task_len)])
        })
        .collect();
    let solves = rec.decode_parallel(&names, calls)?;

    let mut call = source
        .decode_call("merge", "Story:")
        .parents([sys_merge, task, solves[0].id, solves[1].id]);
    if topology == BsmTopology::Parallel {
        let at = rec.engine().message_tokens(sys_merge)?.len() + task_len;
        let la = rec.engine().message_tokens(solves[0].id)?.len();
        let lb = rec.engine().message_tokens(solves[1].id)?.len();
        call = call
            .offsets([Some(0), Some(at - task_len), Some(at), Some(at)])
            .new_offset(at + la.max(lb));
    }
    rec.decode("merge", call)?;
    Ok(rec.finish())
}
