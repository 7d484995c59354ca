//! Iterative multi-agent debate: affirmative, negative and moderator take
//! turns over a shared context, each with its own system prompt as a parent.
//! The moderator's messages are not added to the context; a moderator
//! message containing `STOP` ends the debate.

use serde::{Deserialize, Serialize};

use crate::engine::{Choreographer, PrefillCall};
use crate::error::{ChoreoError, Result};
use crate::workflows::{ContentSource, Recorder, WorkflowTrace};
use crate::MessageId;

pub const STOP_MARKER: &str = "STOP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadIterConfig {
    pub question: String,
    pub max_rounds: usize,
    /// Every message, prompts included, attends to all earlier messages in
    /// creation order instead of its role prompt plus the shared context.
    pub full_history: bool,
}

impl MadIterConfig {
    pub fn new(question: &str, max_rounds: usize) -> Self {
        Self {
            question: question.to_string(),
            max_rounds,
            full_history: false,
        }
    }

    pub fn with_full_history(mut self) -> Self {
        self.full_history = true;
        self
    }
}

const ROLES: [(&str, &str, &str); 3] = [
    ("aff", "Affirmative:", "Argue for the answer you believe is correct."),
    ("neg", "Negative:", "Argue against the previous answer."),
    ("mod", "Moderator:", "Judge the debate. Say STOP when it is settled."),
];

pub fn run_maditer(
    engine: &mut dyn Choreographer,
    cfg: &MadIterConfig,
    source: &ContentSource,
) -> Result<WorkflowTrace> {
    if cfg.max_rounds == 0 {
        return Err(ChoreoError::InvalidConfig("maditer needs at least one round".into()));
    }
    let mut rec = Recorder::new(engine, "maditer");
    let mut all: Vec<MessageId> = Vec::new();
    let mut system = Vec::new();
    for (role, _, default) in ROLES {
        let key = format!("sys.{role}");
        let parents = if cfg.full_history { all.clone() } else { Vec::new() };
        let id = rec.prefill(&key, PrefillCall::new(source.prompt(&key, default)).parents(parents))?;
        system.push(id);
        all.push(id);
    }
    let parents = if cfg.full_history { all.clone() } else { Vec::new() };
    let q = rec.prefill(
        "question",
        PrefillCall::new(source.prompt("question", &cfg.question)).parents(parents),
    )?;
    all.push(q);

    let mut context = vec![q];
    'rounds: for r in 0..cfg.max_rounds {
        for (k, (role, header, _)) in ROLES.iter().enumerate() {
            let name = format!("r{r}.{role}");
            let parents = if cfg.full_history {
                all.clone()
            } else {
                std::iter::once(system[k]).chain(context.iter().copied()).collect()
            };
            let out = rec.decode(&name, source.decode_call(&name, header).parents(parents))?;
            all.push(out.id);
            if *role != "mod" {
                context.push(out.id);
            } else if out.text().contains(STOP_MARKER) {
                break 'rounds;
            }
        }
    }
    Ok(rec.finish())
}
