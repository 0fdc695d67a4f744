use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cfsm_core::checker::{serialize_rule_file, Label, ScriptedRule};
use cfsm_core::client::{CannedClient, ChatClient, ClientConfig, RemoteChatClient};
use cfsm_core::codifier::{
    codify_character, grid_bank_from_machine, CharacterProfile, MachineTarget, TemplateSet, DEFAULT_REPAIR_BUDGET,
};
use cfsm_core::engine::{initial_states, step_character, SceneAction, StepLine};
use cfsm_core::harness::config::{CliOverrides, FileConfig, Settings};
use cfsm_core::harness::{
    emit_bestk, emit_eval, run_bestk, segment_scene, write_output, BestKResult, ExplorationStrategy, Judge,
    NliJudge, OutputFormat, PromptContext, RemoteGenerator, RolloutEnv, StubJudge,
};
use cfsm_core::model::{
    load_character_model, parse_character_model, parse_machine, serialize_character_model, validate_model,
    CharacterStateModel, GuardCondition, GuardKind, RuleSource, Severity, StateId, TransitionRule,
};
use cfsm_core::pfsm::{pstep_character, sample_state, BankMode, QuestionBank, StateDistribution};
use cfsm_core::synthbench::{
    balanced_sample, builtin_table, generate_pool, grid_bank, render_rules, scripted_rules, sweep, to_machine,
    write_pool, BenchmarkConfig, CfsmPredictor, EvalResult, Predictor, RemotePredictor, TablePredictor,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "cfsm", version, about = "Codified state machines for tracking character state")]
struct Cli {
    /// JSON config file: {"checker": {...}, "seed": n, "cache_path": "..."}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// scripted:<rules.json>, remote, or cached:<spec>.
    #[arg(long, global = true)]
    checker: Option<String>,
    #[arg(long, global = true)]
    cache_path: Option<PathBuf>,
    /// Chat-completions endpoint (overrides CHECKER_ENDPOINT).
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// API key (overrides CHECKER_API_KEY).
    #[arg(long, global = true)]
    api_key: Option<String>,
    /// Remote model name (overrides CHECKER_MODEL).
    #[arg(long, global = true)]
    chat_model: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a character model (or a single machine) and optional banks.
    Validate {
        path: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Run the deterministic engine over an episode; one JSON line per machine per step.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the probabilistic engine over an episode.
    Ptrace {
        #[arg(long)]
        model: PathBuf,
        /// JSON object mapping machine_id to question bank. Grid banks are
        /// derived from the machines when omitted.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Grid)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = GroundingArg::Argmax)]
        grounding: GroundingArg,
        #[command(flatten)]
        episode: EpisodeArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Codify a character profile into machines (grid) or question banks (sparse).
    Codify(CodifyArgs),
    /// Synthetic benchmark tools.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Best@K exploration over one or more episodes.
    Bestk(BestkArgs),
}

#[derive(Args)]
struct EpisodeArgs {
    /// JSONL file of {"scene": ..., "action": ...} records.
    #[arg(long, conflicts_with = "text")]
    trace: Option<PathBuf>,
    /// Plain-text scene, split into sentences.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Sentences per transition when reading --text.
    #[arg(long, default_value_t = 1)]
    per_step: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Grid,
    Sparse,
}

impl From<Mode> for BankMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Grid => BankMode::Grid,
            Mode::Sparse => BankMode::Sparse,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GroundingArg {
    Argmax,
    Sample,
}

#[derive(Args)]
struct CodifyArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Grid)]
    mode: Mode,
    /// Client config (endpoint, model, retry settings) as JSON.
    #[arg(long, conflicts_with = "canned")]
    client: Option<PathBuf>,
    /// Replay responses from a JSON list of strings instead of calling a model.
    #[arg(long)]
    canned: Option<PathBuf>,
    /// Machine to produce, as id:dimension:perspective. Repeatable.
    #[arg(long = "machine", required = true)]
    machines: Vec<String>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_REPAIR_BUDGET)]
    budget: u32,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the question banks.
    #[arg(long)]
    banks_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Generate a pool of random paths (JSONL).
    Gen {
        #[arg(long, default_value = "mario")]
        fsm: String,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long)]
        length: usize,
        /// Override the table's initial state.
        #[arg(long)]
        initial: Option<String>,
        /// Emit a balanced sample of up to this many paths per terminal instead of the pool.
        #[arg(long)]
        per_terminal: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a predictor over a range of lengths.
    Eval {
        #[arg(long, default_value = "mario", value_delimiter = ',')]
        fsm: Vec<String>,
        #[arg(long, value_enum, default_value_t = PredictorArg::Cfsm)]
        predictor: PredictorArg,
        /// Inclusive range such as 1..10, or a single length.
        #[arg(long, default_value = "1..10", value_parser = parse_lengths)]
        lengths: (usize, usize),
        #[arg(long, default_value_t = 100)]
        per_terminal: usize,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long)]
        initial: Option<String>,
        /// csv or plotdata; chosen from the --out extension by default.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fixed text rendering of a table.
    Rules {
        #[arg(long, default_value = "mario")]
        fsm: String,
    },
    /// Write model.json, rules.json and banks.json for a table.
    Export {
        #[arg(long, default_value = "mario")]
        fsm: String,
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Cfsm,
    Table,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    Stub,
    Remote,
}

#[derive(Args)]
struct BestkArgs {
    #[arg(long)]
    model: PathBuf,
    /// Episode files (JSONL scene/action records). Repeatable.
    #[arg(long = "trace", required = true)]
    traces: Vec<PathBuf>,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value = "deterministic")]
    strategy: String,
    #[arg(long, value_enum, default_value_t = JudgeArg::Stub)]
    judge: JudgeArg,
    /// Reference text for the remote judge.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Banks for sampled-state-dist; grid banks are derived when omitted.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Generate responses with the remote model at each step.
    #[arg(long)]
    generate: bool,
    #[arg(long, default_value = "")]
    global_instruction: String,
    #[arg(long, default_value = "")]
    character_instruction: String,
    #[arg(long)]
    format: Option<String>,
    /// Curve output (csv or plotdata).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full per-episode results as JSONL.
    #[arg(long)]
    rollouts: Option<PathBuf>,
}

fn parse_lengths(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.trim_start_matches('=')),
        None => (s, s),
    };
    let a: usize = a.trim().parse().map_err(|_| format!("bad length range \"{s}\""))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad length range \"{s}\""))?;
    if a == 0 || a > b {
        return Err(format!("length range \"{s}\" must satisfy 1 <= start <= end"));
    }
    Ok((a, b))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_output(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn settings(cli: &Cli, client: Option<ClientConfig>) -> Result<Settings> {
    let mut file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(c) = client {
        file.checker.get_or_insert_with(Default::default).client = c;
    }
    let overrides = CliOverrides {
        checker: cli.checker.clone(),
        seed: cli.seed,
        cache_path: cli.cache_path.clone(),
        endpoint: cli.endpoint.clone(),
        api_key: cli.api_key.clone(),
        model: cli.chat_model.clone(),
    };
    Ok(Settings::resolve(overrides, |k| std::env::var(k).ok(), file)?)
}

fn remote_client(s: &Settings) -> Result<RemoteChatClient> {
    Ok(RemoteChatClient::from_config(s.client.clone())?)
}

fn load_episode(args: &EpisodeArgs) -> Result<Vec<SceneAction>> {
    match (&args.trace, &args.text) {
        (Some(p), _) => read_trace(p),
        (None, Some(p)) => Ok(segment_scene(&read(p)?, args.per_step)?.segments),
        (None, None) => bail!("give an episode with --trace or --text"),
    }
}

fn read_trace(path: &Path) -> Result<Vec<SceneAction>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn load_model(path: &Path) -> Result<CharacterStateModel> {
    load_character_model(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_banks(path: &Path) -> Result<HashMap<String, QuestionBank>> {
    read_json(path)
}

fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(&it).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Validate { path, bank } => validate(path, bank.as_deref()),
        Command::Run { model, episode, out } => run(cli, model, episode, out.as_deref()),
        Command::Ptrace {
            model,
            bank,
            mode,
            grounding,
            episode,
            out,
        } => ptrace(cli, model, bank.as_deref(), *mode, *grounding, episode, out.as_deref()),
        Command::Codify(args) => codify(cli, args),
        Command::Synth(cmd) => synth(cli, cmd),
        Command::Bestk(args) => bestk(cli, args),
    }
}

fn validate(path: &Path, bank: Option<&Path>) -> Result<ExitCode> {
    let text = read(path)?;
    let model = match parse_character_model(&text) {
        Ok(m) => m,
        Err(character_err) => match parse_machine(&text) {
            Ok(m) => {
                println!("ok: machine {} ({} states, {} rules)", m.machine_id, m.state_count(), m.rules.len());
                return Ok(ExitCode::SUCCESS);
            }
            Err(machine_err) => {
                println!("error: not a character model ({character_err}) nor a machine ({machine_err})");
                return Ok(ExitCode::FAILURE);
            }
        },
    };
    let mut failed = false;
    for d in validate_model(&model) {
        failed |= d.severity == Severity::Error;
        println!("{d}");
    }
    if let Some(bank) = bank {
        let banks = load_banks(bank)?;
        for m in &model.machines {
            match banks.get(&m.machine_id) {
                None => println!("warning [{}]: no bank", m.machine_id),
                Some(b) => {
                    if let Err(e) = b.validate(m) {
                        failed = true;
                        println!("error [{}]: bank: {e}", m.machine_id);
                    }
                }
            }
        }
    }
    if failed {
        return Ok(ExitCode::FAILURE);
    }
    println!("ok: {} with {} machine(s)", model.character_id, model.machines.len());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli, model: &Path, episode: &EpisodeArgs, out: Option<&Path>) -> Result<ExitCode> {
    let model = load_model(model)?;
    let actions = load_episode(episode)?;
    let checker = settings(cli, None)?.build_checker()?;
    let mut states = initial_states(&model);
    let mut lines = Vec::new();
    let mut calls = 0u64;
    for (t, sa) in actions.iter().enumerate() {
        let step = step_character(&model, &states, sa, &checker).with_context(|| format!("step {t}"))?;
        calls += step.total_calls() as u64;
        for (m, (id, s)) in model.machines.iter().zip(&step.steps) {
            let mut line = StepLine::new(t, m, sa, s);
            line.machine = Some(id.clone());
            lines.push(line);
        }
        states = step.next_states();
    }
    emit(out, &jsonl(lines))?;
    log::info!("{} steps, {calls} checker calls", actions.len());
    Ok(ExitCode::SUCCESS)
}

fn ptrace(
    cli: &Cli,
    model: &Path,
    bank: Option<&Path>,
    mode: Mode,
    grounding: GroundingArg,
    episode: &EpisodeArgs,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let model = load_model(model)?;
    let actions = load_episode(episode)?;
    let settings = settings(cli, None)?;
    let checker = settings.build_checker()?;
    let banks = match bank {
        Some(p) => load_banks(p)?,
        None if matches!(mode, Mode::Grid) => model
            .machines
            .iter()
            .map(|m| (m.machine_id.clone(), grid_bank_from_machine(m)))
            .collect(),
        None => bail!("sparse mode needs --bank"),
    };
    for m in &model.machines {
        let b = banks
            .get(&m.machine_id)
            .with_context(|| format!("no bank for machine {}", m.machine_id))?;
        if b.mode != BankMode::from(mode) {
            bail!("bank for {} is not in {:?} mode", m.machine_id, BankMode::from(mode));
        }
        b.validate(m).with_context(|| format!("bank for {}", m.machine_id))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut dists: HashMap<String, StateDistribution> = model
        .machines
        .iter()
        .map(|m| (m.machine_id.clone(), StateDistribution::one_hot(m.state_count(), m.initial)))
        .collect();
    let mut grounded: HashMap<String, StateId> = initial_states(&model);
    let mut lines = Vec::new();
    for (t, sa) in actions.iter().enumerate() {
        let step = pstep_character(&model, &banks, &dists, sa, &checker).with_context(|| format!("step {t}"))?;
        for (m, (id, s)) in model.machines.iter().zip(&step.steps) {
            let next = match grounding {
                GroundingArg::Argmax => s.grounded,
                GroundingArg::Sample => sample_state(&s.dist, &mut rng),
            };
            lines.push(StepLine {
                t,
                action: sa.action_text.clone(),
                scene: sa.scene_text.clone(),
                prior: m.state_name(grounded[id]).to_string(),
                next: m.state_name(next).to_string(),
                rule: None,
                calls: s.checker_calls,
                machine: Some(id.clone()),
                dist: Some(s.dist.probs().to_vec()),
            });
            grounded.insert(id.clone(), next);
        }
        dists = step.distributions();
    }
    emit(out, &jsonl(lines))?;
    Ok(ExitCode::SUCCESS)
}

fn parse_target(spec: &str) -> Result<MachineTarget> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [id, dimension, perspective] = parts[..] else {
        bail!("machine spec \"{spec}\" must be id:dimension:perspective");
    };
    let dimension = serde_json::from_value(serde_json::Value::String(dimension.into()))
        .with_context(|| format!("dimension in \"{spec}\""))?;
    let perspective = serde_json::from_value(serde_json::Value::String(perspective.into()))
        .with_context(|| format!("perspective \"{perspective}\" (active, passive or shared)"))?;
    Ok(MachineTarget::new(id, dimension, perspective))
}

fn codify(cli: &Cli, args: &CodifyArgs) -> Result<ExitCode> {
    let profile = CharacterProfile::parse(&read(&args.profile)?)?;
    let targets = args.machines.iter().map(|s| parse_target(s)).collect::<Result<Vec<_>>>()?;
    let templates = match &args.templates {
        Some(dir) => TemplateSet::load(dir)?,
        None => TemplateSet::default(),
    };
    let client: Box<dyn ChatClient> = match &args.canned {
        Some(p) => Box::new(CannedClient::from_fixture(&read(p)?)?),
        None => {
            let cfg = args.client.as_deref().map(read_json::<ClientConfig>).transpose()?;
            Box::new(remote_client(&settings(cli, cfg)?)?)
        }
    };
    let result = codify_character(&profile, &targets, args.mode.into(), &client, &templates, args.budget)?;
    for (id, r) in &result.reports {
        eprintln!(
            "{id}: {} questions, {} llm calls, {} rejected drafts",
            r.question_count, r.llm_calls, r.rejected_drafts
        );
        for d in &r.diagnostics {
            eprintln!("  {d}");
        }
    }
    eprintln!("total: {} llm calls, {} rejected drafts", result.llm_calls(), result.rejected_drafts());
    emit(args.out.as_deref(), &format!("{}\n", serialize_character_model(&result.model)))?;
    if let Some(p) = &args.banks_out {
        let banks: std::collections::BTreeMap<_, _> = result.banks.iter().collect();
        write_output(p, &format!("{}\n", serde_json::to_string_pretty(&banks)?))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn synth(cli: &Cli, cmd: &SynthCommand) -> Result<ExitCode> {
    let seed = settings(cli, None)?.seed;
    match cmd {
        SynthCommand::Gen {
            fsm,
            paths,
            length,
            initial,
            per_terminal,
            out,
        } => {
            let cfg = BenchmarkConfig {
                fsm: fsm.clone(),
                pool_size: *paths,
                per_terminal: per_terminal.unwrap_or(0),
                min_length: *length,
                max_length: *length,
                seed,
                initial: initial.clone(),
            };
            let table = cfg.table()?;
            let pool = generate_pool(&table, &cfg, *length);
            let text = if per_terminal.is_some() {
                let sample = balanced_sample(&table, &pool, &cfg, *length);
                for s in sample.shortfalls() {
                    log::warn!("{fsm} length {length}: {} short by {}", s.state, s.shortfall);
                }
                write_pool(&sample.traces)
            } else {
                write_pool(&pool)
            };
            emit(out.as_deref(), &text)?;
        }
        SynthCommand::Eval {
            fsm,
            predictor,
            lengths,
            per_terminal,
            paths,
            initial,
            format,
            out,
        } => {
            let mut results: Vec<EvalResult> = Vec::new();
            for name in fsm {
                let cfg = BenchmarkConfig {
                    fsm: name.clone(),
                    pool_size: *paths,
                    per_terminal: *per_terminal,
                    min_length: lengths.0,
                    max_length: lengths.1,
                    seed,
                    initial: initial.clone(),
                };
                let table = cfg.table()?;
                let p: Box<dyn Predictor> = match predictor {
                    PredictorArg::Cfsm => Box::new(CfsmPredictor::scripted(&table)),
                    PredictorArg::Table => Box::new(TablePredictor(table.clone())),
                    PredictorArg::Remote => Box::new(RemotePredictor {
                        client: remote_client(&settings(cli, None)?)?,
                        states: table.states.clone(),
                    }),
                };
                for (sample, result) in sweep(&cfg, p.as_ref())? {
                    for s in sample.shortfalls() {
                        log::info!("{name} length {}: {} short by {}", sample.length, s.state, s.shortfall);
                    }
                    eprintln!(
                        "{name} length {:>2} {}: accuracy {:.4} over {} paths",
                        result.length,
                        result.predictor,
                        result.overall_accuracy,
                        sample.traces.len()
                    );
                    results.push(result);
                }
            }
            let format = output_format(format.as_deref(), out.as_deref())?;
            emit(out.as_deref(), &emit_eval(&results, format)?)?;
        }
        SynthCommand::Rules { fsm } => print!("{}", render_rules(&builtin_table(fsm)?)),
        SynthCommand::Export { fsm, dir } => export(fsm, dir)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn output_format(explicit: Option<&str>, out: Option<&Path>) -> Result<OutputFormat> {
    Ok(match (explicit, out) {
        (Some(f), _) => f.parse()?,
        (None, Some(p)) => OutputFormat::for_path(p),
        (None, None) => OutputFormat::Csv,
    })
}

/// A runnable character wrapping a synthetic table. `Unactivated` behaves as
/// the table's initial state: it gets that state's rules and grid column, plus
/// a last-resort move into it. The scripted rules answer the routing
/// questions `true`.
fn export(fsm: &str, dir: &Path) -> Result<()> {
    let table = builtin_table(fsm)?;
    let mut machine = to_machine(&table);
    let start = StateId(table.initial + 1);
    let unactivated = machine.unactivated();
    let copied: Vec<TransitionRule> = machine
        .rules
        .iter()
        .filter(|r| r.source == RuleSource::State(start))
        .map(|r| TransitionRule {
            source: RuleSource::State(unactivated),
            ..r.clone()
        })
        .collect();
    machine.rules.extend(copied);
    machine.rules.push(TransitionRule {
        source: RuleSource::State(unactivated),
        priority: i64::MAX,
        guard: GuardCondition {
            kind: GuardKind::Always,
            question: None,
            target: start,
        },
    });
    let mut bank = grid_bank(&table);
    if let Some(grid) = bank.grid.as_mut() {
        for row in grid.iter_mut() {
            row[unactivated.0] = row[start.0].clone();
        }
    }
    let relevance = format!("Is the {fsm} character involved?");
    let activity = format!("Does the {fsm} character act?");
    let mut rules = scripted_rules(&table, cfsm_core::checker::default_true_logprob());
    for q in [&relevance, &activity] {
        rules.push(ScriptedRule::new(None, Some(&format!("^{q}$")), Label::True, 0.9f64.ln())?);
    }
    let banks = HashMap::from([(machine.machine_id.clone(), bank)]);
    let model = CharacterStateModel {
        character_id: fsm.to_string(),
        machines: vec![machine],
        relevance_question: relevance,
        activity_question: activity,
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_output(&dir.join("model.json"), &format!("{}\n", serialize_character_model(&model)))?;
    write_output(&dir.join("rules.json"), &format!("{}\n", serialize_rule_file(&rules)))?;
    write_output(&dir.join("banks.json"), &format!("{}\n", serde_json::to_string_pretty(&banks)?))?;
    Ok(())
}

fn bestk(cli: &Cli, args: &BestkArgs) -> Result<ExitCode> {
    let model = load_model(&args.model)?;
    let strategy: ExplorationStrategy = args.strategy.parse()?;
    let settings = settings(cli, None)?;
    let checker = settings.build_checker()?;
    let banks = match &args.bank {
        Some(p) => load_banks(p)?,
        None => model
            .machines
            .iter()
            .map(|m| (m.machine_id.clone(), grid_bank_from_machine(m)))
            .collect(),
    };
    let needs_remote = args.generate || matches!(args.judge, JudgeArg::Remote);
    let client = needs_remote.then(|| remote_client(&settings)).transpose()?;
    let generator = client.as_ref().filter(|_| args.generate).map(|c| RemoteGenerator {
        client: c,
        default_temperature: 0.0,
    });
    let judge: Box<dyn Judge + '_> = match args.judge {
        JudgeArg::Stub => Box::new(StubJudge),
        JudgeArg::Remote => {
            let reference = args.reference.as_deref().context("--judge remote needs --reference")?;
            Box::new(NliJudge {
                client: client.as_ref().expect("client built for remote judge"),
                reference: read(reference)?,
            })
        }
    };
    let mut env = RolloutEnv::new(&model, &checker);
    env.banks = Some(&banks);
    env.generator = generator.as_ref().map(|g| g as _);
    env.context = PromptContext::new(&args.global_instruction, &args.character_instruction);
    let mut results: Vec<BestKResult> = Vec::new();
    for (i, path) in args.traces.iter().enumerate() {
        let episode = read_trace(path)?;
        let r = run_bestk(&episode, &env, strategy, args.k, judge.as_ref(), settings.seed.wrapping_add(i as u64))
            .with_context(|| format!("episode {}", path.display()))?;
        eprintln!("{}: best {} over {} samples", path.display(), r.best, r.k);
        results.push(r);
    }
    if let Some(p) = &args.rollouts {
        write_output(p, &jsonl(&results))?;
    }
    let format = output_format(args.format.as_deref(), args.out.as_deref())?;
    emit(args.out.as_deref(), &emit_bestk(&results, format)?)?;
    Ok(ExitCode::SUCCESS)
}
