//! Two questions, one answer.
//!
//! `Baseline`: question 2 attends to question 1 when prefilled.
//! `Serial`: both questions are prefilled independently (in parallel), and
//! the answer sees them back to back.
//! `Parallel`: both questions sit at the same offset, overlapping, and the
//! answer starts right after the longer one.

use serde::{Deserialize, Serialize};

use crate::engine::{Choreographer, PrefillCall};
use crate::error::Result;
use crate::workflows::{ContentSource, Recorder, WorkflowTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiQaTopology {
    Baseline,
    Serial,
    Parallel,
}

pub const SYSTEM_PROMPT: &str = "Answer all questions.";

pub fn run_multiqa(
    engine: &mut dyn Choreographer,
    q1: &str,
    q2: &str,
    topology: MultiQaTopology,
    source: &ContentSource,
) -> Result<WorkflowTrace> {
    let mut rec = Recorder::new(engine, "multiqa");
    let sys = rec.prefill("sys", PrefillCall::new(source.prompt("sys", SYSTEM_PROMPT)))?;
    let q1_text = source.prompt("q1", q1);
    let q2_text = source.prompt("q2", q2);
    let (a, b) = match topology {
        MultiQaTopology::Baseline => {
            let a = rec.prefill("q1", PrefillCall::new(q1_text).parents([sys]))?;
            let b = rec.prefill("q2", PrefillCall::new(q2_text).parents([sys, a]))?;
            (a, b)
        }
        MultiQaTopology::Serial | MultiQaTopology::Parallel => {
            let ids = rec.prefill_parallel(
                &["q1".into(), "q2".into()],
                vec![
                    PrefillCall::new(q1_text).parents([sys]),
                    PrefillCall::new(q2_text).parents([sys]),
                ],
            )?;
            (ids[0], ids[1])
        }
    };
    let mut call = source.decode_call("answer", "Answer:").parents([sys, a, b]);
    if topology == MultiQaTopology::Parallel {
        let s = rec.engine().message_tokens(sys)?.len();
        let la = rec.engine().message_tokens(a)?.len();
        let lb = rec.engine().message_tokens(b)?.len();
        call = call
            .offsets([Some(0), Some(s), Some(s)])
            .new_offset(s + la.max(lb));
    }
    rec.decode("answer", call)?;
    Ok(rec.finish())
}
