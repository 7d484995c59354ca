//! `choreo`: run workflow scripts under either engine, compare traces,
//! benchmark the workflow suite and maintain fixtures.
//!
//! Exit codes: 0 success (or no difference), 1 traces differ, 2 usage or
//! input error, 3 engine error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use choreo::baseline::BaselineEngine;
use choreo::bench::{run_suite, sweep_config, tot_sweep, SuiteWorkflow};
use choreo::cost::SuiteReport;
use choreo::engine::{Choreographer, Engine, DEFAULT_CAPACITY};
use choreo::fixtures::{self, cookbook_config, REGENERATE_COMMAND};
use choreo::model::init_weights;
use choreo::script::{read_trace, run_script, write_trace, Script, ScriptError};
use choreo::tensor::Scalar;
use choreo::workflows::WorkflowTrace;
use choreo::{weights_io, ChoreoError, Model, ModelConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "choreo", version, about = "Prompt choreography over a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Weight file utilities.
    Weights {
        #[command(subcommand)]
        command: WeightsCommand,
    },
    /// Run a workflow script and write its trace.
    Run(RunArgs),
    /// Compare two trace files step by step.
    Diff(DiffArgs),
    /// Paired baseline/choreographed cost benchmark.
    Bench(BenchArgs),
    /// Run a script under the choreographed engine and dump its KV cache
    /// metadata, one JSON line per token.
    DumpCache(DumpArgs),
    /// Regenerate or verify committed fixtures and cookbook scripts.
    Fixtures {
        #[command(subcommand)]
        command: FixturesCommand,
    },
}

#[derive(Subcommand)]
enum WeightsCommand {
    /// Initialize seeded random weights.
    Init {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        model: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FixturesCommand {
    Regenerate {
        #[arg(long, default_value = ".")]
        root: PathBuf,
    },
    Check {
        #[arg(long, default_value = ".")]
        root: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Tiny,
    /// The model the cookbook scripts were recorded with.
    Cookbook,
}

#[derive(Args)]
struct ConfigArgs {
    /// Model config JSON.
    #[arg(long, env = "CHOREO_CONFIG", conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ModelConfig> {
        let cfg = match (&self.config, self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, Some(Preset::Tiny)) => ModelConfig::tiny(),
            (None, Some(Preset::Cookbook)) => cookbook_config(),
            (None, Some(Preset::Default) | None) => ModelConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Weight file; overrides the config's seeded initialization.
    #[arg(long, conflicts_with_all = ["config", "preset"])]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineChoice {
    Choreo,
    Baseline,
}

#[derive(Args)]
struct RunArgs {
    script: PathBuf,
    #[arg(long, value_enum, default_value_t = EngineChoice::Choreo)]
    engine: EngineChoice,
    #[command(flatten)]
    model: ModelArgs,
    /// Trace output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Baseline only: disable the prefix cache.
    #[arg(long)]
    no_prefix_cache: bool,
    /// Print a per-call cost table to stderr.
    #[arg(long)]
    report: bool,
}

#[derive(Args)]
struct DiffArgs {
    a: PathBuf,
    b: PathBuf,
    /// Also compare recorded logits.
    #[arg(long)]
    logits: bool,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchWorkflow {
    Tot,
    Madpar,
    Maditer,
    Suite,
    /// Tree-of-thoughts over a branches × voters grid.
    Sweep,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchWorkflow::Suite)]
    workflow: BenchWorkflow,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..=16))]
    branches: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=16))]
    voters: u64,
    #[arg(long, default_value_t = 3)]
    agents: usize,
    #[arg(long, default_value_t = 3)]
    rounds: usize,
    #[arg(long, default_value_t = 30)]
    seeds: u64,
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the full reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    script: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Differ,
    Usage(anyhow::Error),
    Engine(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn from_script(path: &Path, e: ScriptError) -> Failure {
    match e {
        ScriptError::Engine { .. } => Failure::Engine(anyhow!(e)),
        other => Failure::Usage(anyhow!(other).context(path.display().to_string())),
    }
}

fn engine_err(e: ChoreoError) -> Failure {
    Failure::Engine(e.into())
}

fn load_script(path: &Path) -> Result<Script, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Script::parse(&text).map_err(|e| from_script(path, e))
}

fn build_model<T: Scalar>(args: &ModelArgs) -> anyhow::Result<Arc<Model<T>>> {
    let model = match &args.weights {
        Some(path) => Model::new(weights_io::load::<T>(path).with_context(|| format!("loading {}", path.display()))?)?,
        None => Model::from_config(&args.config.resolve()?)?,
    };
    Ok(Arc::new(model))
}

fn write_out(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn print_report(engine: &dyn Choreographer) {
    eprintln!(
        "{:>4} {:<16} {:>8} {:>8} {:>6} {:>14} {:>12} {:>14}",
        "call", "op", "prefill", "decode", "hit", "prefill FLOPs", "repos FLOPs", "decode FLOPs"
    );
    for (i, c) in engine.cost_log().iter().enumerate() {
        eprintln!(
            "{i:>4} {:<16} {:>8} {:>8} {:>6} {:>14} {:>12} {:>14}",
            c.op.name(),
            c.prefill_tokens,
            c.decode_tokens,
            c.cache_hit_tokens,
            c.prefill_flops,
            c.reposition_flops,
            c.decode_flops
        );
    }
}

fn run_with<T: Scalar>(args: &RunArgs, script: &Script) -> Result<WorkflowTrace, Failure> {
    let model = build_model::<T>(&args.model)?;
    let mut engine: Box<dyn Choreographer> = match args.engine {
        EngineChoice::Choreo => Box::new(Engine::new(model, DEFAULT_CAPACITY)),
        EngineChoice::Baseline => Box::new(BaselineEngine::new(model).with_prefix_cache(!args.no_prefix_cache)),
    };
    let trace = run_script(engine.as_mut(), script).map_err(|e| from_script(&args.script, e))?;
    if args.report {
        print_report(engine.as_ref());
    }
    Ok(trace)
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let script = load_script(&args.script)?;
    let trace = match args.model.precision {
        Precision::F64 => run_with::<f64>(&args, &script)?,
        Precision::F32 => run_with::<f32>(&args, &script)?,
    };
    let text = write_trace(&trace, &Script::sha256(&script.to_json()));
    write_out(args.out.as_deref(), &text)?;
    Ok(())
}

fn cmd_diff(args: DiffArgs) -> Result<(), Failure> {
    let load = |p: &Path| -> Result<WorkflowTrace, Failure> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        read_trace(&text).map(|(_, t)| t).map_err(|e| from_script(p, e))
    };
    let (a, b) = (load(&args.a)?, load(&args.b)?);
    let mut diffs = Vec::new();
    if a.steps.len() != b.steps.len() {
        diffs.push(format!("step count {} vs {}", a.steps.len(), b.steps.len()));
    }
    for (x, y) in a.steps.iter().zip(&b.steps) {
        if (&x.name, x.op, &x.parents, &x.offsets, x.new_offset) != (&y.name, y.op, &y.parents, &y.offsets, y.new_offset) {
            diffs.push(format!("{}: structure differs", x.name));
        } else if x.text != y.text {
            diffs.push(format!("{}: text {:?} vs {:?}", x.name, x.text, y.text));
        } else if args.logits {
            match (&x.logits, &y.logits) {
                (Some(lx), Some(ly)) => {
                    let d = max_row_diff(lx, ly);
                    if d > args.tol {
                        diffs.push(format!("{}: logits differ by {d:.3e}", x.name));
                    }
                }
                (None, None) => {}
                _ => diffs.push(format!("{}: logits recorded in one trace only", x.name)),
            }
        }
    }
    if diffs.is_empty() {
        println!("identical ({} steps)", a.steps.len());
        Ok(())
    } else {
        for d in &diffs {
            println!("{d}");
        }
        Err(Failure::Differ)
    }
}

fn max_row_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            let same = x.len() == y.len();
            x.iter().zip(y).map(move |(p, q)| if same { (p - q).abs() } else { f64::INFINITY })
        })
        .fold(0.0, f64::max)
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let seeds = 0..args.seeds;
    let tot = SuiteWorkflow::Tot {
        branches: args.branches as usize,
        voters: args.voters as usize,
    };
    let mut reports: Vec<SuiteReport> = Vec::new();
    let mut cfg = args.config.resolve()?;
    if let BenchWorkflow::Sweep = args.workflow {
        if args.config.config.is_none() && args.config.preset.is_none() {
            cfg = sweep_config();
        }
        let model = Arc::new(Model::<f32>::from_config(&cfg).map_err(engine_err)?);
        let grid: Vec<usize> = (1..=16).filter(|n: &usize| n.is_power_of_two()).collect();
        let seeds: Vec<u64> = seeds.collect();
        let cells = tot_sweep(&model, &grid, &grid, &seeds).map_err(engine_err)?;
        println!("{:>8} {:>6}  {:>12}  {:>12}", "branches", "voters", "prefill", "first token");
        for c in &cells {
            println!(
                "{:>8} {:>6}  {:>12.2}  {:>12.2}",
                c.branches, c.voters, c.report.prefill_flop_ratio.estimate, c.report.first_token_flop_ratio.estimate
            );
        }
        if let Some(path) = &args.json {
            write_out(Some(path), &serde_json::to_string_pretty(&cells).context("serializing")?)?;
        }
        return Ok(());
    }
    let model = Arc::new(Model::<f32>::from_config(&cfg).map_err(engine_err)?);
    let workflows = match args.workflow {
        BenchWorkflow::Tot => vec![tot],
        BenchWorkflow::Madpar => vec![SuiteWorkflow::MadPar {
            agents: args.agents,
            rounds: args.rounds,
        }],
        BenchWorkflow::Maditer => vec![SuiteWorkflow::MadIter { rounds: args.rounds }],
        BenchWorkflow::Suite | BenchWorkflow::Sweep => SuiteWorkflow::suite().to_vec(),
    };
    println!("{}", SuiteReport::render_header());
    for wf in workflows {
        let rep = run_suite(&model, wf, seeds.clone()).map_err(engine_err)?;
        println!("{}", rep.render_row());
        reports.push(rep);
    }
    if let Some(path) = &args.json {
        write_out(Some(path), &serde_json::to_string_pretty(&reports).context("serializing")?)?;
    }
    Ok(())
}

fn dump_with<T: Scalar>(args: &DumpArgs, script: &Script) -> Result<Vec<u8>, Failure> {
    let mut engine = Engine::new(build_model::<T>(&args.model)?, DEFAULT_CAPACITY);
    run_script(&mut engine, script).map_err(|e| from_script(&args.script, e))?;
    let mut buf = Vec::new();
    engine.cache().dump_jsonl(&mut buf).map_err(engine_err)?;
    Ok(buf)
}

fn cmd_dump(args: DumpArgs) -> Result<(), Failure> {
    let script = load_script(&args.script)?;
    let buf = match args.model.precision {
        Precision::F64 => dump_with::<f64>(&args, &script)?,
        Precision::F32 => dump_with::<f32>(&args, &script)?,
    };
    write_out(args.out.as_deref(), &String::from_utf8_lossy(&buf))?;
    Ok(())
}

fn cmd_fixtures(cmd: FixturesCommand) -> Result<(), Failure> {
    match cmd {
        FixturesCommand::Regenerate { root } => {
            let entries = fixtures::regenerate(&root).map_err(engine_err)?;
            for e in &entries {
                println!("{}  {}", e.sha256, e.path);
            }
            Ok(())
        }
        FixturesCommand::Check { root } => {
            let stale = fixtures::check(&root).map_err(engine_err)?;
            if stale.is_empty() {
                println!("fixtures up to date");
                Ok(())
            } else {
                for p in &stale {
                    println!("stale: {p}");
                }
                println!("run `{REGENERATE_COMMAND}`");
                Err(Failure::Differ)
            }
        }
    }
}

fn cmd_weights(cmd: WeightsCommand) -> Result<(), Failure> {
    let WeightsCommand::Init { seed, model, out } = cmd;
    let cfg = model.resolve()?.with_seed(seed);
    let weights = init_weights::<f32>(&cfg).map_err(engine_err)?;
    weights_io::save(&weights, &out).with_context(|| format!("writing {}", out.display()))?;
    println!("{}  {}", weights.checksum(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Weights { command } => cmd_weights(command),
        Command::Run(a) => cmd_run(a),
        Command::Diff(a) => cmd_diff(a),
        Command::Bench(a) => cmd_bench(a),
        Command::DumpCache(a) => cmd_dump(a),
        Command::Fixtures { command } => cmd_fixtures(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Differ) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Engine(e)) => {
            eprintln!("engine error: {e:#}");
            ExitCode::from(3)
        }
    }
}
