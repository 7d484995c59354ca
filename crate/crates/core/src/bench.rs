//! Paired baseline-vs-choreographed benchmark runs.
//!
//! Each instance runs one workflow under both engines with every prompt and
//! output drawn from the same seeded [`ContentSource`], so the two engines
//! emit identical tokens and differ only in how much they encode. The
//! baseline runs with its prefix cache on, fresh per instance.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineEngine;
use crate::cost::{RunTotals, SuiteReport};
use crate::engine::{Choreographer, Engine, DEFAULT_CAPACITY};
use crate::error::{ChoreoError, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Scalar;
use crate::workflows::{
    run_maditer, run_madpar, run_tot, ContentSource, MadIterConfig, MadParConfig, TotConfig,
    WorkflowTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "workflow", rename_all = "snake_case")]
pub enum SuiteWorkflow {
    Tot { branches: usize, voters: usize },
    MadPar { agents: usize, rounds: usize },
    MadIter { rounds: usize },
}

impl SuiteWorkflow {
    pub fn name(&self) -> &'static str {
        match self {
            SuiteWorkflow::Tot { .. } => "tot",
            SuiteWorkflow::MadPar { .. } => "madpar",
            SuiteWorkflow::MadIter { .. } => "maditer",
        }
    }

    /// The configurations of the main experiments.
    pub fn suite() -> [SuiteWorkflow; 3] {
        [
            SuiteWorkflow::MadIter { rounds: 3 },
            SuiteWorkflow::Tot {
                branches: 8,
                voters: 4,
            },
            SuiteWorkflow::MadPar {
                agents: 3,
                rounds: 3,
            },
        ]
    }

    pub fn run(&self, engine: &mut dyn Choreographer, source: &ContentSource) -> Result<WorkflowTrace> {
        let q = "question";
        match *self {
            SuiteWorkflow::Tot { branches, voters } => {
                run_tot(engine, &TotConfig::new(q, branches, voters), source)
            }
            SuiteWorkflow::MadPar { agents, rounds } => {
                run_madpar(engine, &MadParConfig::new(q, agents, rounds), source)
            }
            SuiteWorkflow::MadIter { rounds } => {
                run_maditer(engine, &MadIterConfig::new(q, rounds), source)
            }
        }
    }
}

/// Both traces must have the same steps with the same generated tokens.
pub fn check_same_outputs(a: &WorkflowTrace, b: &WorkflowTrace) -> Result<()> {
    if a.steps.len() != b.steps.len() {
        return Err(ChoreoError::TraceMismatch(format!(
            "{} steps vs {}",
            a.steps.len(),
            b.steps.len()
        )));
    }
    for (x, y) in a.steps.iter().zip(&b.steps) {
        if x.name != y.name || x.generated != y.generated || x.token_count != y.token_count {
            return Err(ChoreoError::TraceMismatch(format!("step {:?}", x.name)));
        }
    }
    Ok(())
}

/// One instance under both engines: (baseline, choreographed) totals.
pub fn run_paired<T: Scalar>(
    model: &Arc<Model<T>>,
    workflow: SuiteWorkflow,
    seed: u64,
) -> Result<(RunTotals, RunTotals)> {
    let source = ContentSource::bench(seed);
    let mut baseline = BaselineEngine::new(model.clone());
    let mut choreo = Engine::new(model.clone(), DEFAULT_CAPACITY);
    let tb = workflow.run(&mut baseline, &source)?;
    let tc = workflow.run(&mut choreo, &source)?;
    check_same_outputs(&tb, &tc)?;
    Ok((
        RunTotals::from_log(baseline.cost_log()),
        RunTotals::from_log(choreo.cost_log()),
    ))
}

/// `seeds` paired instances of one workflow.
pub fn run_suite<T: Scalar>(
    model: &Arc<Model<T>>,
    workflow: SuiteWorkflow,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<SuiteReport> {
    let mut b = Vec::new();
    let mut c = Vec::new();
    for seed in seeds {
        let (x, y) = run_paired(model, workflow, seed)?;
        b.push(x);
        c.push(y);
    }
    Ok(SuiteReport::new(workflow.name(), b, c, 0))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub branches: usize,
    pub voters: usize,
    pub report: SuiteReport,
}

/// Tree-of-thoughts over a branches × voters grid.
pub fn tot_sweep<T: Scalar>(
    model: &Arc<Model<T>>,
    branches: &[usize],
    voters: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &b in branches {
        for &v in voters {
            let wf = SuiteWorkflow::Tot {
                branches: b,
                voters: v,
            };
            cells.push(SweepCell {
                branches: b,
                voters: v,
                report: run_suite(model, wf, seeds.iter().copied())?,
            });
        }
    }
    Ok(cells)
}

/// The sweep's largest prompts (16 branches of up to 128 bytes each) do not
/// fit the default window.
pub fn sweep_config() -> ModelConfig {
    ModelConfig {
        context_window: 4096,
        ..ModelConfig::default()
    }
}
