//! Golden fixtures and cookbook scripts, regenerated by
//! `choreo fixtures regenerate`.
//!
//! Layout under the repository root:
//!
//! ```text
//! fixtures/MANIFEST.json               name, producing command, sha256, path
//! fixtures/weights_tiny_seed0.json     tiny-config checksum and tensor manifest
//! fixtures/mask_panels.json            the two reconstructed mask panels
//! fixtures/conversation.*.trace.jsonl  conversation script under each engine
//! workflows/*.json                     runnable workflow scripts
//! ```
//!
//! Everything is produced twice in memory and compared before writing, so a
//! nondeterministic build fails instead of rewriting goldens.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baseline::BaselineEngine;
use crate::engine::{Choreographer, Engine, DEFAULT_CAPACITY};
use crate::error::{ChoreoError, Result};
use crate::kv_cache::TokenMeta;
use crate::masking::{build_dense_mask, DenseMask, VisibilitySpec};
use crate::model::{init_weights, Model, ModelConfig, WeightSet};
use crate::sampling::SamplingParams;
use crate::script::{run_script, write_trace, Script, ScriptError};
use crate::workflows::{
    run_branching, run_bsm, run_documents, run_maditer, run_madpar, run_multiqa, run_tot,
    BsmTopology, ContentSource, MadIterConfig, MadParConfig, MultiQaTopology, TotConfig, Turn,
    WorkflowTrace,
};
use crate::MessageId;

pub const REGENERATE_COMMAND: &str = "choreo fixtures regenerate";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub name: String,
    pub command: String,
    pub sha256: String,
    pub path: String,
}

/// A mask panel: cached messages of two tokens each, then the query tokens
/// of one forward step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskPanel {
    pub cached_messages: usize,
    /// Messages whose first token is already cached, in physical order.
    pub in_progress: Vec<MessageId>,
    /// (message, parents) of each query-token group.
    pub queries: Vec<(MessageId, Vec<MessageId>, usize)>,
    pub mask: DenseMask,
}

fn meta(m: usize, physical_index: usize) -> TokenMeta {
    TokenMeta {
        m: MessageId(m),
        j: 0,
        physical_index,
        token_id: 0,
    }
}

fn panel(
    cached: usize,
    in_progress: &[usize],
    queries: &[(usize, &[usize], usize)],
) -> Result<MaskPanel> {
    let mut cache: Vec<TokenMeta> = (0..cached * 2).map(|i| meta(i / 2, i)).collect();
    for &m in in_progress {
        cache.push(meta(m, cache.len()));
    }
    let mut batch = Vec::new();
    for &(m, _, n) in queries {
        for _ in 0..n {
            batch.push(meta(m, cache.len() + batch.len()));
        }
    }
    let specs: Vec<VisibilitySpec> = queries
        .iter()
        .map(|(m, p, _)| VisibilitySpec::new(MessageId(*m), p.iter().map(|x| MessageId(*x))))
        .collect();
    Ok(MaskPanel {
        cached_messages: cached,
        in_progress: in_progress.iter().map(|m| MessageId(*m)).collect(),
        queries: queries
            .iter()
            .map(|(m, p, n)| (MessageId(*m), p.iter().map(|x| MessageId(*x)).collect(), *n))
            .collect(),
        mask: build_dense_mask(&batch, &cache, &specs)?,
    })
}

/// Parallel prefill: two 3-token messages over three cached messages, with
/// disjoint parents {0, 1} and {2}.
pub fn prefill_panel() -> Result<MaskPanel> {
    panel(3, &[], &[(3, &[0, 1], 3), (4, &[2], 3)])
}

/// Parallel decode: the second tokens of three output messages, whose first
/// tokens sit interleaved after three cached messages; parents {0}, {1}, {2}.
pub fn decode_panel() -> Result<MaskPanel> {
    panel(3, &[3, 4, 5], &[(3, &[0], 1), (4, &[1], 1), (5, &[2], 1)])
}

/// Model the cookbook scripts and conversation traces were recorded with.
pub fn cookbook_config() -> ModelConfig {
    ModelConfig::tiny().with_window(1024)
}

fn tiny_model() -> Result<Arc<Model<f64>>> {
    Ok(Arc::new(Model::from_config(&cookbook_config())?))
}

fn script_err(e: ScriptError) -> ChoreoError {
    match e {
        ScriptError::Engine { source, .. } => source,
        other => ChoreoError::InvalidConfig(other.to_string()),
    }
}

fn cookbook_turns() -> Vec<Turn> {
    vec![Turn::new("What is 2 + 2?"), Turn::new("And times 3?")]
}

/// Runnable scripts for the cookbook, derived from recorded runs of the
/// workflow functions. The conversation scripts generate freely; the rest
/// carry the recorded outputs as forced text so both engines replay them
/// identically.
pub fn cookbook_scripts() -> Result<Vec<(String, Script)>> {
    let model = tiny_model()?;
    let greedy = SamplingParams::greedy(12);
    let free = ContentSource::free(greedy.clone());
    let forced = ContentSource::synthetic(0, 8, 24).with_sampling(greedy.clone());
    type Run<'a> = Box<dyn Fn(&mut dyn Choreographer) -> Result<WorkflowTrace> + 'a>;
    let runs: Vec<(&str, bool, Run)> = vec![
        (
            "branching",
            false,
            Box::new(|e| run_branching(e, &cookbook_turns(), &Turn::new("What about 2 + 5?"), &free)),
        ),
        (
            "documents",
            false,
            Box::new(|e| {
                let docs = ["Paris is in France.", "Rome is in Italy.", "Oslo is in Norway."]
                    .map(String::from);
                run_documents(e, &docs, "Where is Rome?", &[1, 0], &free)
            }),
        ),
        (
            "multiqa_serial",
            false,
            Box::new(|e| run_multiqa(e, "Capital of Peru?", "Largest ocean?", MultiQaTopology::Serial, &free)),
        ),
        (
            "multiqa_parallel",
            false,
            Box::new(|e| run_multiqa(e, "Capital of Peru?", "Largest ocean?", MultiQaTopology::Parallel, &free)),
        ),
        (
            "tot",
            true,
            Box::new(|e| run_tot(e, &TotConfig::new("", 3, 2), &forced)),
        ),
        (
            "madpar",
            true,
            Box::new(|e| run_madpar(e, &MadParConfig::new("", 3, 2), &forced)),
        ),
        (
            "maditer",
            true,
            Box::new(|e| run_maditer(e, &MadIterConfig::new("", 2), &forced)),
        ),
        (
            "bsm_parallel",
            true,
            Box::new(|e| run_bsm(e, &["dog", "ball", "park", "rain"], BsmTopology::Parallel, &forced)),
        ),
    ];
    let mut scripts = vec![("conversation".to_string(), conversation_script())];
    for (name, force, run) in runs {
        let mut engine = Engine::new(model.clone(), DEFAULT_CAPACITY);
        let trace = run(&mut engine)?;
        let mut script = Script::from_trace(&trace, greedy.clone(), force);
        script.name = name.to_string();
        scripts.push((name.to_string(), script));
    }
    Ok(scripts)
}

/// Two user turns, each reply attending to the whole history.
pub fn conversation_script() -> Script {
    let text = r#"{
  "name": "conversation",
  "sampling": {"mode": "greedy", "max_tokens": 12},
  "steps": [
    {"op": "prefill", "name": "user0", "content": "What is 2 + 2?"},
    {"op": "decode", "name": "assistant0", "header": "Assistant:", "parents": ["user0"]},
    {"op": "prefill", "name": "user1", "content": "And times 3?", "parents": ["user0", "assistant0"]},
    {"op": "decode", "name": "assistant1", "header": "Assistant:", "parents": ["user0", "assistant0", "user1"]}
  ]
}"#;
    Script::parse(text).expect("conversation script is valid")
}

fn conversation_trace(engine: &mut dyn Choreographer) -> Result<String> {
    let script = conversation_script();
    let json = script.to_json();
    let mut trace = run_script(engine, &script).map_err(script_err)?;
    for s in &mut trace.steps {
        s.logits = None;
    }
    Ok(write_trace(&trace, &Script::sha256(&json)))
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("fixture serializes");
    s.push('\n');
    s
}

fn panel_json(p: &MaskPanel) -> serde_json::Value {
    json!({
        "cached_messages": p.cached_messages,
        "in_progress": p.in_progress,
        "queries": p.queries.iter().map(|(m, parents, n)| json!({"message": m, "parents": parents, "tokens": n})).collect::<Vec<_>>(),
        "rows": p.mask.rows,
        "cols": p.mask.cols,
        "mask": p.mask.render().lines().collect::<Vec<_>>(),
    })
}

/// Every fixture and script as (repository-relative path, contents).
pub fn generate() -> Result<Vec<(PathBuf, String)>> {
    let mut files = Vec::new();

    let cfg = ModelConfig::tiny();
    let weights: WeightSet<f32> = init_weights(&cfg)?;
    files.push((
        PathBuf::from("fixtures/weights_tiny_seed0.json"),
        pretty(&json!({
            "config": cfg,
            "checksum": weights.checksum(),
            "tensors": WeightSet::<f32>::manifest(&cfg),
        })),
    ));

    files.push((
        PathBuf::from("fixtures/mask_panels.json"),
        pretty(&json!({
            "prefill": panel_json(&prefill_panel()?),
            "decode": panel_json(&decode_panel()?),
        })),
    ));

    let model = tiny_model()?;
    let mut choreo = Engine::new(model.clone(), DEFAULT_CAPACITY);
    files.push((
        PathBuf::from("fixtures/conversation.choreo.trace.jsonl"),
        conversation_trace(&mut choreo)?,
    ));
    let mut baseline = BaselineEngine::new(model);
    files.push((
        PathBuf::from("fixtures/conversation.baseline.trace.jsonl"),
        conversation_trace(&mut baseline)?,
    ));

    for (name, script) in cookbook_scripts()? {
        let mut text = script.to_json();
        text.push('\n');
        files.push((PathBuf::from(format!("workflows/{name}.json")), text));
    }
    Ok(files)
}

fn manifest(files: &[(PathBuf, String)]) -> Vec<FixtureEntry> {
    files
        .iter()
        .map(|(p, text)| FixtureEntry {
            name: p
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .split('.')
                .next()
                .unwrap_or_default()
                .to_string(),
            command: REGENERATE_COMMAND.to_string(),
            sha256: Script::sha256(text),
            path: p.to_string_lossy().into_owned(),
        })
        .collect()
}

/// Generate twice, compare, then write everything plus the manifest under
/// `root`.
pub fn regenerate(root: &Path) -> Result<Vec<FixtureEntry>> {
    let first = generate()?;
    let second = generate()?;
    for ((p, a), (_, b)) in first.iter().zip(&second) {
        if a != b {
            return Err(ChoreoError::Nondeterministic(p.display().to_string()));
        }
    }
    let entries = manifest(&first);
    for (p, text) in &first {
        let path = root.join(p);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, text)?;
    }
    fs::write(root.join("fixtures/MANIFEST.json"), pretty(&entries))?;
    Ok(entries)
}

/// Paths under `root` whose committed contents differ from a fresh
/// generation, plus manifest entries with no generator.
pub fn check(root: &Path) -> Result<Vec<String>> {
    let files = generate()?;
    let mut stale = Vec::new();
    for (p, text) in &files {
        if fs::read_to_string(root.join(p)).ok().as_deref() != Some(text.as_str()) {
            stale.push(p.display().to_string());
        }
    }
    let known: BTreeSet<String> = files.iter().map(|(p, _)| p.display().to_string()).collect();
    let committed: Vec<FixtureEntry> = fs::read_to_string(root.join("fixtures/MANIFEST.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    if committed != manifest(&files) {
        stale.push("fixtures/MANIFEST.json".into());
    }
    stale.extend(committed.into_iter().map(|e| e.path).filter(|p| !known.contains(p)));
    Ok(stale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panels_have_expected_shape() {
        let p = prefill_panel().unwrap();
        assert_eq!((p.mask.rows, p.mask.cols), (6, 12));
        let d = decode_panel().unwrap();
        assert_eq!((d.mask.rows, d.mask.cols), (3, 12));
    }

    #[test]
    fn cookbook_scripts_run_under_both_engines() {
        let model = tiny_model().unwrap();
        for (name, script) in cookbook_scripts().unwrap() {
            let mut c = Engine::new(model.clone(), DEFAULT_CAPACITY);
            let mut b = BaselineEngine::new(model.clone());
            run_script(&mut c, &script).unwrap_or_else(|e| panic!("{name}: {e}"));
            run_script(&mut b, &script).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
