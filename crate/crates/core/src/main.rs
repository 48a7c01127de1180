use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use glider::expert::{ToyBaseModel, DEFAULT_HIDDEN, DEFAULT_MODULES, DEFAULT_RANK};
use glider::harness::{
    self, emit_heatmap, evaluate, score_figure_svg, sweep_alpha, sweep_csv, sweep_topk, BenchmarkSuite,
    DescriptionSource, EvalOptions, Evaluator, ExpertBundle, DEFAULT_ALPHAS, DEFAULT_HELD_OUT, DEFAULT_KS,
    DEFAULT_PS,
};
use glider::pool::ExpertPool;
use glider::router::{Mode, RoutingConfig, Selection, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_THRESHOLD};
use glider::semantic::{self, Embedder, LlmClient, MockEmbedder, Origin, RemoteConfig, RemoteEmbedder, RemoteLlm};
use glider::training::{train_expert, SyntheticTask, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Multi-scale expert routing over pools of low-rank adapter experts.
#[derive(Debug, Parser)]
#[command(name = "glider", version, args_override_self = true)]
struct Cli {
    /// Seed for training, evaluation batches and search.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Offline mode: canned descriptions and hash embeddings, no network.
    #[arg(long, global = true)]
    mock_llm: bool,
    /// key=value file with defaults for any long flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic task and train an expert on it.
    TrainExpert(TrainArgs),
    /// Attach a global routing vector and description to an expert.
    Describe(DescribeArgs),
    /// Collect described experts into a pool file.
    BuildPool(BuildPoolArgs),
    /// Route one task's query through the pool and print the trace.
    Route(RouteArgs),
    /// Evaluate every routing mode on held-in and held-out tasks.
    Eval(EvalArgs),
    /// GLIDER losses and retrieval under fixed global scales.
    SweepAlpha(SweepAlphaArgs),
    /// GLIDER losses under top-k and top-p selection.
    SweepTopk(SweepTopkArgs),
    /// Expert selection frequencies per module for one task.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    name: String,
    /// Task generator seed; derived from the name when omitted.
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    d: usize,
    #[arg(long, default_value_t = DEFAULT_MODULES)]
    m: usize,
    #[arg(long, default_value_t = DEFAULT_RANK)]
    rank: usize,
    #[arg(long)]
    lora_steps: Option<usize>,
    #[arg(long)]
    gate_steps: Option<usize>,
    /// Also write the loss curve as CSV.
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DescribeArgs {
    #[arg(long)]
    expert: PathBuf,
    /// Defaults to rewriting the input file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildPoolArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true, value_name = "EXPERT")]
    experts: Vec<PathBuf>,
}

#[derive(Debug, Args, Clone)]
struct RoutingArgs {
    #[arg(long, default_value = "glider")]
    mode: String,
    #[arg(long, conflicts_with = "top_p")]
    k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Cosine threshold on the best global score.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

impl RoutingArgs {
    fn config(&self) -> Result<RoutingConfig> {
        let mode: Mode = self.mode.parse()?;
        let selection = match (self.k, self.top_p) {
            (_, Some(p)) => Selection::TopP(p),
            (Some(k), None) => Selection::TopK(k),
            (None, None) => Selection::TopK(glider::router::DEFAULT_TOP_K),
        };
        let cfg = RoutingConfig {
            p: self.threshold,
            gamma: self.gamma,
            beta: self.beta,
            selection,
            mode,
            ..RoutingConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SuiteArgs {
    #[arg(long)]
    pool: PathBuf,
    /// Expert bundles whose tasks form the held-in set.
    #[arg(long, required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HELD_OUT)]
    held_out: usize,
    #[arg(long, default_value_t = EvalOptions::default().eval_tokens)]
    tokens: usize,
}

#[derive(Debug, Args)]
struct RouteArgs {
    #[arg(long)]
    pool: PathBuf,
    /// Expert bundle holding the task to query.
    #[arg(long)]
    task: PathBuf,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[command(flatten)]
    routing: RoutingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    routing: RoutingArgs,
    /// Comma-separated modes; all when omitted.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<String>,
    /// Also draw the best global score per task.
    #[arg(long, value_name = "FILE")]
    scores_svg: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepAlphaArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    routing: RoutingArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHAS)]
    alphas: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepTopkArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    routing: RoutingArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PS)]
    ps: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[command(flatten)]
    routing: RoutingArgs,
    /// Task to trace; the first held-in task when omitted.
    #[arg(long)]
    task: Option<String>,
    /// Output stem; `.csv` and `.svg` are appended.
    #[arg(long)]
    out: PathBuf,
}

/// Description backend chosen by `--mock-llm`.
struct Semantics {
    llm: Option<RemoteLlm>,
    embedder: Box<dyn Embedder>,
}

impl Semantics {
    fn new(mock: bool) -> Result<Self> {
        if mock {
            return Ok(Self {
                llm: None,
                embedder: Box::new(MockEmbedder::default()),
            });
        }
        let llm = RemoteLlm::new(RemoteConfig::llm_from_env().context("configuring the LLM client")?);
        let embedder = RemoteEmbedder::new(RemoteConfig::embed_from_env().context("configuring the embedder")?);
        Ok(Self {
            llm: Some(llm),
            embedder: Box::new(embedder),
        })
    }

    fn source(&self) -> DescriptionSource<'_> {
        match &self.llm {
            Some(l) => DescriptionSource::Client(l as &dyn LlmClient),
            None => DescriptionSource::Mock,
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let args = match with_config_defaults(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.render().to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

/// Splices `--key value` pairs from the `--config` file in right after the
/// subcommand, so flags given on the command line still win.
fn with_config_defaults(args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), n + 1);
        };
        let (key, value) = (key.trim(), value.trim());
        if key == "config" {
            bail!("{}:{}: config files cannot nest", path.display(), n + 1);
        }
        match value {
            "true" => extra.push(format!("--{key}")),
            "false" => {}
            _ => extra.push(format!("--{key}={value}")),
        }
    }
    let names = [
        "train-expert",
        "describe",
        "build-pool",
        "route",
        "eval",
        "sweep-alpha",
        "sweep-topk",
        "heatmap",
    ];
    let at = args
        .iter()
        .position(|a| names.contains(&a.as_str()))
        .map_or(args.len(), |i| i + 1);
    let mut out = args[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn config_path(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainExpert(a) => train(a, cli.seed),
        Command::Describe(a) => describe(a, cli.seed, &Semantics::new(cli.mock_llm)?),
        Command::BuildPool(a) => build_pool(a),
        Command::Route(a) => route(a, cli.seed, &Semantics::new(cli.mock_llm)?),
        Command::Eval(a) => eval(a, cli.seed, &Semantics::new(cli.mock_llm)?),
        Command::SweepAlpha(a) => sweep_alpha_cmd(a, cli.seed, &Semantics::new(cli.mock_llm)?),
        Command::SweepTopk(a) => sweep_topk_cmd(a, cli.seed, &Semantics::new(cli.mock_llm)?),
        Command::Heatmap(a) => heatmap(a, cli.seed, &Semantics::new(cli.mock_llm)?),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Stable seed from a task name.
fn name_seed(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let base = ToyBaseModel::from_seed(a.d, a.m, a.base_seed)?;
    let task = SyntheticTask::generate(a.name.clone(), a.d, a.task_seed.unwrap_or_else(|| name_seed(&a.name)));
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        lora_steps: a.lora_steps.unwrap_or(defaults.lora_steps),
        gate_steps: a.gate_steps.unwrap_or(defaults.gate_steps),
        rank: a.rank,
        seed,
        ..defaults
    };
    let (expert, log) = train_expert(&base, &task, &cfg)?;
    if let Some(path) = &a.log {
        std::fs::write(path, log.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    ExpertBundle::new(&base, &task, &expert).save(&a.out)?;
    eprintln!("trained {} -> {}", a.name, a.out.display());
    Ok(())
}

fn describe(a: DescribeArgs, seed: u64, sem: &Semantics) -> Result<()> {
    let mut bundle = ExpertBundle::load(&a.expert)?;
    let task = bundle.task.to_task()?;
    let mut expert = bundle.expert()?;
    let examples = harness::description_examples(&task, seed);
    let (g, description) = sem
        .source()
        .describe(&task, &examples, Origin::Expert, sem.embedder.as_ref())?;
    expert.set_global_vector(g)?;
    expert.task_description = description;
    bundle.expert = glider::pool::ExpertRecord::from_expert(&expert);
    let out = a.out.as_ref().unwrap_or(&a.expert);
    bundle.save(out)?;
    eprintln!("described {}: {}", expert.name, expert.task_description);
    Ok(())
}

fn build_pool(a: BuildPoolArgs) -> Result<()> {
    let bundles = a
        .experts
        .iter()
        .map(|p| ExpertBundle::load(p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let first = &bundles[0];
    let base = first.base.build().map_err(anyhow::Error::msg)?;
    let d_g = bundles
        .iter()
        .find_map(|b| b.expert.global_vector.as_ref().map(|g| g.shape.iter().product()))
        .unwrap_or(semantic::DEFAULT_MOCK_DIM);
    let mut pool = ExpertPool::new(base, d_g);
    for (b, path) in bundles.iter().zip(&a.experts) {
        if b.base != first.base {
            bail!("{} was trained on a different base model", path.display());
        }
        if b.expert.global_vector.is_none() {
            eprintln!("warning: {} has no global vector; run `glider describe` first", path.display());
        }
        pool.add_expert(b.expert()?)?;
    }
    pool.save(&a.out)?;
    println!("{} experts, checksum {}", pool.len(), pool.checksum());
    Ok(())
}

fn load_pool(path: &Path) -> Result<ExpertPool> {
    ExpertPool::load(path).with_context(|| format!("loading pool {}", path.display()))
}

/// Held-in tasks in pool order plus generated held-out mixtures.
fn load_suite(pool: &ExpertPool, s: &SuiteArgs, seed: u64) -> Result<BenchmarkSuite> {
    let mut held_in: Vec<Option<SyntheticTask>> = vec![None; pool.len()];
    for path in &s.tasks {
        let bundle = ExpertBundle::load(path)?;
        let i = pool
            .index_of(&bundle.expert.name)
            .with_context(|| format!("{}: expert {:?} is not in the pool", path.display(), bundle.expert.name))?;
        held_in[i] = Some(bundle.task.to_task()?);
    }
    let held_in: Vec<SyntheticTask> = held_in.into_iter().flatten().collect();
    Ok(harness::build_suite(held_in, s.held_out, seed)?)
}

fn evaluator<'p>(pool: &'p ExpertPool, s: &SuiteArgs, seed: u64, sem: &Semantics) -> Result<Evaluator<'p>> {
    let suite = load_suite(pool, s, seed)?;
    let options = EvalOptions {
        eval_tokens: s.tokens,
        seed,
        ..EvalOptions::default()
    };
    Ok(Evaluator::new(pool, &suite, options, &sem.source(), sem.embedder.as_ref())?)
}

fn route(a: RouteArgs, seed: u64, sem: &Semantics) -> Result<()> {
    let cfg = a.routing.config()?;
    let pool = load_pool(&a.pool)?;
    let task = ExpertBundle::load(&a.task)?.task.to_task()?;
    let suite = BenchmarkSuite {
        held_in: vec![task],
        held_out: Vec::new(),
        seed,
    };
    let options = EvalOptions {
        eval_tokens: a.tokens,
        seed,
        ..EvalOptions::default()
    };
    let ev = Evaluator::new(&pool, &suite, options, &sem.source(), sem.embedder.as_ref())?;
    let q = &ev.queries[0];
    let (loss, trace) = ev.run(q, cfg.mode, &cfg)?;
    eprintln!("{} via {}: loss {loss:.6e}, max global score {:.4}", q.name, cfg.mode, q.s_glob_max());
    let text = match trace {
        Some(t) => t.to_csv(&q.name),
        None => format!("query_id,mode,loss\n{},{},{loss:.12e}\n", q.name, cfg.mode),
    };
    write_output(a.out.as_deref(), &text)
}

fn eval(a: EvalArgs, seed: u64, sem: &Semantics) -> Result<()> {
    let cfg = a.routing.config()?;
    let modes = if a.modes.is_empty() {
        Mode::ALL.to_vec()
    } else {
        a.modes.iter().map(|m| m.parse()).collect::<std::result::Result<Vec<Mode>, _>>()?
    };
    let pool = load_pool(&a.suite.pool)?;
    let ev = evaluator(&pool, &a.suite, seed, sem)?;
    let report = evaluate(&ev, &cfg, &modes)?;
    if let Some(path) = &a.scores_svg {
        std::fs::write(path, score_figure_svg(&report, cfg.p)).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!(
        "held-in global retrieval {:.3}",
        report.held_in_global_retrieval()
    );
    write_output(a.out.as_deref(), &report.to_csv())
}

fn sweep_alpha_cmd(a: SweepAlphaArgs, seed: u64, sem: &Semantics) -> Result<()> {
    let cfg = a.routing.config()?;
    let pool = load_pool(&a.suite.pool)?;
    let ev = evaluator(&pool, &a.suite, seed, sem)?;
    let rows = sweep_alpha(&ev, &cfg, &a.alphas)?;
    write_output(a.out.as_deref(), &sweep_csv("alpha", &rows))
}

fn sweep_topk_cmd(a: SweepTopkArgs, seed: u64, sem: &Semantics) -> Result<()> {
    let cfg = a.routing.config()?;
    let pool = load_pool(&a.suite.pool)?;
    let ev = evaluator(&pool, &a.suite, seed, sem)?;
    let rows = sweep_topk(&ev, &cfg, &a.ks, &a.ps)?;
    write_output(a.out.as_deref(), &sweep_csv("strategy", &rows))
}

fn heatmap(a: HeatmapArgs, seed: u64, sem: &Semantics) -> Result<()> {
    let cfg = a.routing.config()?;
    let pool = load_pool(&a.suite.pool)?;
    let ev = evaluator(&pool, &a.suite, seed, sem)?;
    let q = match &a.task {
        Some(name) => ev
            .queries
            .iter()
            .find(|q| &q.name == name)
            .with_context(|| format!("no task named {name:?}"))?,
        None => &ev.queries[0],
    };
    let (_, trace) = ev.run(q, cfg.mode, &cfg)?;
    let trace = trace.with_context(|| format!("mode {} does not route tokens", cfg.mode))?;
    let (csv, svg) = emit_heatmap(&trace, Some(q.oracle), &a.out)?;
    eprintln!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}
