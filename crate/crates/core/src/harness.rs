//! Synthetic benchmark: held-in tasks with dedicated experts, held-out
//! convex mixtures of them, evaluation across routing modes, ablation
//! sweeps and heatmap output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::ToyBaseModel;
use crate::linalg::{softmax, Mat};
use crate::pool::{BaseSpec, Blob, ExpertPool, ExpertRecord, PoolError};
use crate::router::{
    self, alpha_scale, arrow_forward, batch_mse, glider_forward_ctx, lorahub_fit, lorahub_forward,
    merge_forward, oracle_forward, oracle_select, phatgoose_forward, ArrowRouter, Mode,
    QueryContext, RouterError, Routers, RoutingConfig, RoutingTrace, Selection,
};
use crate::semantic::{self, Embedder, LlmClient, MockLlm, Origin, SemanticError};
use crate::training::{self, eval_batch, train_expert, Batch, SyntheticTask, TrainConfig, TrainError};

pub const DEFAULT_EXPERTS: usize = 8;
pub const DEFAULT_HELD_OUT: usize = 4;
pub const DEFAULT_ALPHAS: [f64; 6] = [1.0, 3.0, 10.0, 100.0, 1000.0, 3000.0];
pub const DEFAULT_KS: [usize; 3] = [1, 2, 3];
pub const DEFAULT_PS: [f64; 3] = [0.25, 0.5, 0.75];
pub const BUNDLE_FORMAT_VERSION: &str = "glider-expert/1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("need at least 2 held-in tasks to build mixtures, got {0}")]
    TooFewTasks(usize),
    #[error("task {task:?} does not match the pool: {reason}")]
    TaskMismatch { task: String, reason: String },
    #[error("{0}")]
    BadInput(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Held-out task built as a convex mixture of two held-in maps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutTask {
    pub task: SyntheticTask,
    /// Indices into the suite's held-in list.
    pub parents: (usize, usize),
    /// Weight of the first parent; the second gets `1 - weight`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSuite {
    pub held_in: Vec<SyntheticTask>,
    pub held_out: Vec<HeldOutTask>,
    pub seed: u64,
}

/// Adds `n_held_out` mixtures of random held-in pairs, each with a fresh
/// input center and a fresh description.
pub fn build_suite(held_in: Vec<SyntheticTask>, n_held_out: usize, seed: u64) -> Result<BenchmarkSuite> {
    if held_in.len() < 2 {
        return Err(HarnessError::TooFewTasks(held_in.len()));
    }
    let d = held_in[0].hidden();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e1d);
    let mut held_out = Vec::with_capacity(n_held_out);
    for k in 0..n_held_out {
        let a = rng.random_range(0..held_in.len());
        let mut b = rng.random_range(0..held_in.len() - 1);
        if b >= a {
            b += 1;
        }
        let weight: f64 = rng.random_range(0.25..0.75);
        let mut map = held_in[a].target_map.scale(weight);
        map.add_scaled(&held_in[b].target_map, 1.0 - weight)
            .map_err(|e| HarnessError::BadInput(e.to_string()))?;
        let center = (0..d)
            .map(|_| training::CENTER_SCALE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let tag: u32 = rng.random_range(0..1_000_000);
        let name = format!("held-out-{k}");
        let description_text = format!(
            "Combine {:.0} parts of one learned mapping with {:.0} parts of another \
             on inputs drawn from a new region (mixture {tag:06}).",
            100.0 * weight,
            100.0 * (1.0 - weight)
        );
        held_out.push(HeldOutTask {
            task: SyntheticTask {
                name,
                target_map: map,
                input_center: center,
                input_spread: held_in[a].input_spread,
                description_text,
                seed: rng.random(),
            },
            parents: (a, b),
            weight,
        });
    }
    Ok(BenchmarkSuite {
        held_in,
        held_out,
        seed,
    })
}

/// Shape of a generated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n_experts: usize,
    pub n_held_out: usize,
    pub d: usize,
    pub m: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_experts: DEFAULT_EXPERTS,
            n_held_out: DEFAULT_HELD_OUT,
            d: crate::expert::DEFAULT_HIDDEN,
            m: crate::expert::DEFAULT_MODULES,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

/// Where task and query descriptions come from.
pub enum DescriptionSource<'a> {
    /// Offline: the LLM answers with the task's own description text.
    Mock,
    Client(&'a dyn LlmClient),
}

impl DescriptionSource<'_> {
    /// Global vector and description for a task, from three of its
    /// examples.
    pub fn describe(
        &self,
        task: &SyntheticTask,
        examples: &Batch,
        origin: Origin,
        embedder: &dyn Embedder,
    ) -> Result<(Vec<f64>, String)> {
        let pairs = examples
            .iter()
            .take(semantic::EXAMPLES_PER_PROMPT)
            .map(|(x, y)| (format_vector(x), format_vector(y)))
            .collect();
        Ok(match self {
            DescriptionSource::Mock => {
                let llm = MockLlm::canned(task.description_text.clone());
                semantic::make_global_vector(pairs, origin, &llm, embedder)?
            }
            DescriptionSource::Client(c) => semantic::make_global_vector(pairs, origin, *c, embedder)?,
        })
    }
}

/// Compact text form of a vector for prompts.
pub fn format_vector(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Seeds for the held-in tasks of a scenario.
pub fn task_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_5eed);
    (0..n).map(|_| rng.random()).collect()
}

pub fn held_in_tasks(cfg: &ScenarioConfig) -> Vec<SyntheticTask> {
    task_seeds(cfg.seed, cfg.n_experts)
        .into_iter()
        .enumerate()
        .map(|(i, s)| SyntheticTask::generate(format!("task-{i}"), cfg.d, s))
        .collect()
}

/// Trains and describes one expert; the description uses three examples
/// drawn from the task's own distribution.
pub fn contribute_expert(
    base: &ToyBaseModel,
    task: &SyntheticTask,
    train: &TrainConfig,
    source: &DescriptionSource<'_>,
    embedder: &dyn Embedder,
) -> Result<crate::expert::ExpertModel> {
    let (mut expert, _) = train_expert(base, task, train)?;
    let examples = description_examples(task, train.seed);
    let (g, description) = source.describe(task, &examples, Origin::Expert, embedder)?;
    expert
        .set_global_vector(g)
        .map_err(|e| HarnessError::BadInput(e.to_string()))?;
    expert.task_description = description;
    Ok(expert)
}

pub fn description_examples(task: &SyntheticTask, seed: u64) -> Batch {
    eval_batch(task, semantic::EXAMPLES_PER_PROMPT, seed ^ 0xde5c)
}

/// A trained pool together with its benchmark suite.
pub struct Scenario {
    pub pool: ExpertPool,
    pub suite: BenchmarkSuite,
}

impl Scenario {
    /// Trains one expert per held-in task (in parallel) and builds the
    /// suite.
    pub fn build(cfg: &ScenarioConfig, source: &DescriptionSource<'_>, embedder: &dyn Embedder) -> Result<Self> {
        let base = ToyBaseModel::from_seed(cfg.d, cfg.m, cfg.seed)
            .map_err(|e| HarnessError::BadInput(e.to_string()))?;
        let tasks = held_in_tasks(cfg);
        let experts: Vec<_> = tasks
            .par_iter()
            .map(|t| contribute_expert(&base, t, &cfg.train, source, embedder))
            .collect::<Result<_>>()?;
        let d_g = experts
            .first()
            .and_then(|e| e.global_vector.as_ref())
            .map_or(semantic::DEFAULT_MOCK_DIM, Vec::len);
        let mut pool = ExpertPool::new(base, d_g);
        for e in experts {
            pool.add_expert(e)?;
        }
        let suite = build_suite(tasks, cfg.n_held_out, cfg.seed)?;
        Ok(Self { pool, suite })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    HeldIn,
    HeldOut,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::HeldIn => "held-in",
            TaskKind::HeldOut => "held-out",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Tokens per query.
    pub eval_tokens: usize,
    pub lorahub_shots: usize,
    pub lorahub_budget: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            eval_tokens: 64,
            lorahub_shots: 5,
            lorahub_budget: 40,
            seed: 0,
        }
    }
}

/// One admitted query: its tokens, targets and global scores.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub name: String,
    pub kind: TaskKind,
    pub batch: Batch,
    pub tokens: Vec<Vec<f64>>,
    pub s_glob: Vec<f64>,
    pub description: String,
    /// Expert with the lowest loss on this query.
    pub oracle: usize,
    pub task_seed: u64,
}

impl PreparedQuery {
    pub fn s_glob_max(&self) -> f64 {
        self.s_glob.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the best global score, ties to the lower index.
    pub fn global_top1(&self) -> usize {
        crate::linalg::descending_order(&self.s_glob)[0]
    }

    pub fn context(&self, cfg: &RoutingConfig) -> QueryContext {
        QueryContext {
            s_glob: self.s_glob.clone(),
            alpha: alpha_scale(&self.s_glob, cfg),
        }
    }

    fn loss(&self, outputs: &[Vec<f64>]) -> Result<f64> {
        let mut it = outputs.iter();
        Ok(batch_mse(&self.batch, |_| Ok(it.next().expect("one output per token").clone()))?)
    }
}

/// Routers and queries for one pool and suite, shared by evaluations and
/// sweeps.
pub struct Evaluator<'p> {
    pub pool: &'p ExpertPool,
    pub routers: Routers,
    pub arrow: Option<ArrowRouter>,
    pub queries: Vec<PreparedQuery>,
    pub options: EvalOptions,
}

impl<'p> Evaluator<'p> {
    /// Builds routers and admits one query per task: the description is
    /// generated and embedded once here.
    pub fn new(
        pool: &'p ExpertPool,
        suite: &BenchmarkSuite,
        options: EvalOptions,
        source: &DescriptionSource<'_>,
        embedder: &dyn Embedder,
    ) -> Result<Self> {
        let routers = Routers::build(pool)?;
        let arrow = ArrowRouter::build(pool).ok();
        let tasks = suite
            .held_in
            .iter()
            .map(|t| (t, TaskKind::HeldIn))
            .chain(suite.held_out.iter().map(|h| (&h.task, TaskKind::HeldOut)));
        let mut queries = Vec::new();
        for (task, kind) in tasks {
            if task.hidden() != pool.base().hidden() {
                return Err(HarnessError::TaskMismatch {
                    task: task.name.clone(),
                    reason: format!("width {} vs base {}", task.hidden(), pool.base().hidden()),
                });
            }
            let batch = eval_batch(task, options.eval_tokens, options.seed);
            let (q_u, description) = source.describe(task, &batch, Origin::Query, embedder)?;
            let ctx = routers.query_context(&q_u, &RoutingConfig::default())?;
            queries.push(PreparedQuery {
                name: task.name.clone(),
                kind,
                tokens: batch.iter().map(|(x, _)| x.clone()).collect(),
                oracle: oracle_select(pool, &batch)?,
                batch,
                s_glob: ctx.s_glob,
                description,
                task_seed: task.seed,
            });
        }
        Ok(Self {
            pool,
            routers,
            arrow,
            queries,
            options,
        })
    }

    /// Loss of one query under one mode, with the GLIDER/Phatgoose/Arrow
    /// trace when the mode routes tokens.
    pub fn run(&self, q: &PreparedQuery, mode: Mode, cfg: &RoutingConfig) -> Result<(f64, Option<RoutingTrace>)> {
        let pool = self.pool;
        let (outputs, trace) = match mode {
            Mode::Glider => {
                let r = glider_forward_ctx(pool, &self.routers, &q.tokens, &q.context(cfg), cfg)?;
                (r.outputs, Some(r.trace))
            }
            Mode::Phatgoose => {
                let r = phatgoose_forward(pool, &self.routers, &q.tokens, cfg)?;
                (r.outputs, Some(r.trace))
            }
            Mode::Arrow => {
                let arrow = match &self.arrow {
                    Some(a) => a,
                    None => &ArrowRouter::build(pool)?,
                };
                let r = arrow_forward(pool, arrow, &q.tokens, cfg)?;
                (r.outputs, Some(r.trace))
            }
            Mode::Merge => (merge_forward(pool, &q.tokens)?, None),
            Mode::LoraHub => {
                let task_seed = self.options.seed ^ q.task_seed.rotate_left(7) ^ 0x10ab;
                let shots: Batch = q.batch.iter().take(self.options.lorahub_shots).cloned().collect();
                let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
                let fit = lorahub_fit(pool, &shots, self.options.lorahub_budget, &mut rng)?;
                (lorahub_forward(pool, &fit.weights, &q.tokens)?, None)
            }
            Mode::Oracle => (oracle_forward(pool, q.oracle, &q.tokens)?, None),
        };
        Ok((q.loss(&outputs)?, trace))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub name: String,
    pub kind: TaskKind,
    pub oracle: usize,
    /// Loss per evaluated mode, in the requested order.
    pub losses: Vec<(Mode, f64)>,
    pub s_glob_max: f64,
    pub global_top1: usize,
    pub alpha: f64,
    /// Fraction of GLIDER token-module decisions whose first choice is the
    /// oracle expert.
    pub routing_retrieval: Option<f64>,
    /// Mean entropy (nats) of the GLIDER routing distribution.
    pub routing_entropy: Option<f64>,
    pub glider_trace: Option<RoutingTrace>,
}

impl TaskReport {
    pub fn loss(&self, mode: Mode) -> Option<f64> {
        self.losses.iter().find(|(m, _)| *m == mode).map(|(_, l)| *l)
    }

    pub fn global_hit(&self) -> bool {
        self.global_top1 == self.oracle
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub tasks: Vec<TaskReport>,
    pub modes: Vec<Mode>,
    pub seed: u64,
}

impl EvalReport {
    pub fn held_in(&self) -> impl Iterator<Item = &TaskReport> {
        self.tasks.iter().filter(|t| t.kind == TaskKind::HeldIn)
    }

    pub fn held_out(&self) -> impl Iterator<Item = &TaskReport> {
        self.tasks.iter().filter(|t| t.kind == TaskKind::HeldOut)
    }

    /// Fraction of held-in queries whose best global score is the oracle
    /// expert.
    pub fn held_in_global_retrieval(&self) -> f64 {
        rate(self.held_in().map(TaskReport::global_hit))
    }

    pub fn mean_loss(&self, kind: TaskKind, mode: Mode) -> Option<f64> {
        mean(self.tasks.iter().filter(|t| t.kind == kind).filter_map(|t| t.loss(mode)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,kind,oracle,mode,loss,s_glob_max,global_top1,alpha,routing_retrieval,routing_entropy\n");
        for t in &self.tasks {
            for (mode, loss) in &t.losses {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{:.12e},{:.12},{},{},{},{}",
                    t.name,
                    t.kind.as_str(),
                    t.oracle,
                    mode,
                    loss,
                    t.s_glob_max,
                    t.global_top1,
                    t.alpha,
                    opt_fixed(t.routing_retrieval),
                    opt_fixed(t.routing_entropy),
                );
            }
        }
        s
    }
}

fn opt_fixed(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12}")).unwrap_or_default()
}

fn rate(hits: impl Iterator<Item = bool>) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for h in hits {
        n += 1;
        k += h as usize;
    }
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut n, mut total) = (0usize, 0.0);
    for x in xs {
        n += 1;
        total += x;
    }
    (n > 0).then(|| total / n as f64)
}

/// Mean Shannon entropy of the full softmax at every decision.
pub fn routing_entropy(trace: &RoutingTrace) -> f64 {
    mean(trace.decisions.iter().map(|d| {
        softmax(&d.route.scores)
            .map(|p| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
            .unwrap_or(0.0)
    }))
    .unwrap_or(0.0)
}

/// Every task under every mode. Tasks run in parallel; the report keeps
/// suite order.
pub fn evaluate(ev: &Evaluator<'_>, cfg: &RoutingConfig, modes: &[Mode]) -> Result<EvalReport> {
    cfg.validate()?;
    let tasks = ev
        .queries
        .par_iter()
        .map(|q| {
            let mut losses = Vec::with_capacity(modes.len());
            let mut glider_trace = None;
            for &mode in modes {
                let (loss, trace) = ev.run(q, mode, cfg)?;
                losses.push((mode, loss));
                if mode == Mode::Glider {
                    glider_trace = trace;
                }
            }
            Ok(TaskReport {
                name: q.name.clone(),
                kind: q.kind,
                oracle: q.oracle,
                losses,
                s_glob_max: q.s_glob_max(),
                global_top1: q.global_top1(),
                alpha: alpha_scale(&q.s_glob, cfg),
                routing_retrieval: glider_trace.as_ref().map(|t| t.top1_rate(q.oracle)),
                routing_entropy: glider_trace.as_ref().map(routing_entropy),
                glider_trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        tasks,
        modes: modes.to_vec(),
        seed: ev.options.seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub held_in_loss: f64,
    pub held_out_loss: f64,
    /// Mean held-in routing retrieval rate.
    pub held_in_retrieval: f64,
}

fn sweep_row(ev: &Evaluator<'_>, label: String, cfg: &RoutingConfig) -> Result<SweepRow> {
    let per_query = ev
        .queries
        .par_iter()
        .map(|q| {
            let (loss, trace) = ev.run(q, Mode::Glider, cfg)?;
            let retrieval = trace.map_or(0.0, |t| t.top1_rate(q.oracle));
            Ok((q.kind, loss, retrieval))
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |kind: TaskKind, f: fn(&(TaskKind, f64, f64)) -> f64| {
        mean(per_query.iter().filter(|r| r.0 == kind).map(f)).unwrap_or(f64::NAN)
    };
    Ok(SweepRow {
        label,
        held_in_loss: pick(TaskKind::HeldIn, |r| r.1),
        held_out_loss: pick(TaskKind::HeldOut, |r| r.1),
        held_in_retrieval: pick(TaskKind::HeldIn, |r| r.2),
    })
}

/// GLIDER with α fixed to each value in turn.
pub fn sweep_alpha(ev: &Evaluator<'_>, base_cfg: &RoutingConfig, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(HarnessError::BadInput("alpha list is empty".into()));
    }
    alphas
        .iter()
        .map(|&a| {
            let cfg = RoutingConfig {
                alpha_override: Some(a),
                ..base_cfg.clone()
            };
            sweep_row(ev, format_alpha(a), &cfg)
        })
        .collect()
}

fn format_alpha(a: f64) -> String {
    if a.fract() == 0.0 && a.abs() < 1e15 {
        format!("{}", a as i64)
    } else {
        format!("{a}")
    }
}

/// GLIDER under each top-k and top-p selection rule, in that order.
pub fn sweep_topk(ev: &Evaluator<'_>, base_cfg: &RoutingConfig, ks: &[usize], ps: &[f64]) -> Result<Vec<SweepRow>> {
    if ks.is_empty() && ps.is_empty() {
        return Err(HarnessError::BadInput("no routing strategies given".into()));
    }
    let strategies = ks
        .iter()
        .map(|&k| (format!("Top-{k}"), Selection::TopK(k)))
        .chain(ps.iter().map(|&p| (format!("Top-{}%", format_alpha(100.0 * p)), Selection::TopP(p))));
    strategies
        .map(|(label, selection)| {
            let cfg = RoutingConfig {
                selection,
                ..base_cfg.clone()
            };
            cfg.validate()?;
            sweep_row(ev, label, &cfg)
        })
        .collect()
}

pub fn sweep_csv(first_column: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{first_column},held_in_loss,held_out_loss,held_in_retrieval\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.12e},{:.12e},{:.12}",
            r.label, r.held_in_loss, r.held_out_loss, r.held_in_retrieval
        );
    }
    s
}

/// `freq[m][j]`: selections of expert `j` at module `m` per token.
pub fn selection_frequency(trace: &RoutingTrace) -> Vec<Vec<f64>> {
    let tokens = trace
        .decisions
        .iter()
        .map(|d| d.token + 1)
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    trace
        .selection_counts()
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / tokens).collect())
        .collect()
}

pub fn heatmap_csv(trace: &RoutingTrace) -> String {
    let mut s = String::from("module_id,expert_name,frequency\n");
    for (m, row) in selection_frequency(trace).iter().enumerate() {
        for (j, f) in row.iter().enumerate() {
            let _ = writeln!(s, "{m},{},{f:.6}", trace.expert_names[j]);
        }
    }
    s
}

const CELL: usize = 36;
const LABEL_W: usize = 120;
const HEADER_H: usize = 40;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Experts as rows, modules as columns, darker cells for more frequent
/// selection. The oracle row, if given, is outlined.
pub fn heatmap_svg(trace: &RoutingTrace, oracle: Option<usize>) -> String {
    let freq = selection_frequency(trace);
    let n = trace.expert_names.len();
    let m = trace.num_modules;
    let width = LABEL_W + CELL * m + 10;
    let height = HEADER_H + CELL * n + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="4" y="16">{} routing</text>"#,
        xml_escape(trace.mode.as_str())
    );
    for col in 0..m {
        let x = LABEL_W + col * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">m{col}</text>"#, HEADER_H - 6);
    }
    for (j, name) in trace.expert_names.iter().enumerate() {
        let y = HEADER_H + j * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LABEL_W - 6,
            y + CELL / 2 + 4,
            xml_escape(name)
        );
        for (col, row) in freq.iter().enumerate() {
            let f = row[j].clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - f)).round() as u8;
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="#ccc"><title>{:.4}</title></rect>"##,
                LABEL_W + col * CELL,
                row[j]
            );
        }
    }
    if let Some(o) = oracle.filter(|&o| o < n) {
        let _ = writeln!(
            s,
            r#"<rect x="{LABEL_W}" y="{}" width="{}" height="{CELL}" fill="none" stroke="red" stroke-width="3"/>"#,
            HEADER_H + o * CELL,
            CELL * m
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` and `<stem>.svg`; returns both paths.
pub fn emit_heatmap(trace: &RoutingTrace, oracle: Option<usize>, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if trace.decisions.is_empty() {
        return Err(HarnessError::BadInput("routing trace is empty".into()));
    }
    let csv = stem.with_extension("csv");
    let svg = stem.with_extension("svg");
    std::fs::write(&csv, heatmap_csv(trace)).map_err(io_err(&csv))?;
    std::fs::write(&svg, heatmap_svg(trace, oracle)).map_err(io_err(&svg))?;
    Ok((csv, svg))
}

/// Bar per task of its best global score, with the threshold drawn as a
/// dashed line.
pub fn score_figure_svg(report: &EvalReport, threshold: f64) -> String {
    let bar = 28usize;
    let plot_h = 200usize;
    let width = 60 + bar * report.tasks.len().max(1) + 20;
    let height = plot_h + 110;
    let y_of = |v: f64| 20.0 + (1.0 - v.clamp(0.0, 1.0)) * plot_h as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (i, t) in report.tasks.iter().enumerate() {
        let x = 60 + i * bar;
        let top = y_of(t.s_glob_max);
        let color = if t.kind == TaskKind::HeldIn { "#4060c0" } else { "#c08040" };
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{top:.2}" width="{}" height="{:.2}" fill="{color}"><title>{} {:.4}</title></rect>"#,
            x + 2,
            bar - 4,
            y_of(0.0) - top,
            xml_escape(&t.name),
            t.s_glob_max
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate({},{}) rotate(60)">{}</text>"#,
            x + bar / 2,
            plot_h + 26,
            xml_escape(&t.name)
        );
    }
    let ty = y_of(threshold);
    let _ = writeln!(
        s,
        r#"<line x1="56" y1="{ty:.2}" x2="{}" y2="{ty:.2}" stroke="red" stroke-dasharray="4 3"/>"#,
        width - 10
    );
    let _ = writeln!(s, r#"<text x="4" y="{:.2}">p={threshold}</text>"#, ty + 3.0);
    s.push_str("</svg>\n");
    s
}

/// Serialized task definition, stored next to an expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub name: String,
    pub target_map: Blob,
    pub input_center: Blob,
    pub input_spread: f64,
    pub description_text: String,
    pub seed: u64,
}

impl TaskRecord {
    pub fn from_task(t: &SyntheticTask) -> Self {
        Self {
            name: t.name.clone(),
            target_map: Blob::from_mat(&t.target_map),
            input_center: Blob::from_vec(&t.input_center),
            input_spread: t.input_spread,
            description_text: t.description_text.clone(),
            seed: t.seed,
        }
    }

    pub fn to_task(&self) -> Result<SyntheticTask> {
        let bad = |e: String| HarnessError::BadInput(format!("task {}: {e}", self.name));
        let target_map: Mat = self.target_map.decode_mat().map_err(bad)?;
        let input_center = self.input_center.decode_vec().map_err(bad)?;
        if target_map.shape() != (input_center.len(), input_center.len()) {
            return Err(bad("target map and input center disagree on width".into()));
        }
        Ok(SyntheticTask {
            name: self.name.clone(),
            target_map,
            input_center,
            input_spread: self.input_spread,
            description_text: self.description_text.clone(),
            seed: self.seed,
        })
    }
}

/// A contributor's output: base spec, task and trained expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertBundle {
    pub version: String,
    pub base: BaseSpec,
    pub task: TaskRecord,
    pub expert: ExpertRecord,
}

impl ExpertBundle {
    pub fn new(base: &ToyBaseModel, task: &SyntheticTask, expert: &crate::expert::ExpertModel) -> Self {
        Self {
            version: BUNDLE_FORMAT_VERSION.to_string(),
            base: BaseSpec::of(base),
            task: TaskRecord::from_task(task),
            expert: ExpertRecord::from_expert(expert),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("bundle serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let bundle: Self = serde_json::from_str(&text)
            .map_err(|e| HarnessError::BadInput(format!("{}: {e}", path.display())))?;
        if bundle.version != BUNDLE_FORMAT_VERSION {
            return Err(HarnessError::BadInput(format!(
                "{}: unsupported bundle version {:?}",
                path.display(),
                bundle.version
            )));
        }
        Ok(bundle)
    }

    pub fn expert(&self) -> Result<crate::expert::ExpertModel> {
        self.expert
            .to_expert()
            .map_err(|(_, reason)| HarnessError::BadInput(format!("expert {}: {reason}", self.expert.name)))
    }
}

/// Ensures routers can be built before a long evaluation starts.
pub fn check_routable(pool: &ExpertPool) -> Result<()> {
    router::build_routers(pool)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{RouteDecision, TokenRoute};

    fn tasks(n: usize, d: usize) -> Vec<SyntheticTask> {
        (0..n).map(|i| SyntheticTask::generate(format!("t{i}"), d, i as u64 + 1)).collect()
    }

    #[test]
    fn suite_needs_two_tasks() {
        assert!(matches!(build_suite(tasks(1, 4), 1, 0), Err(HarnessError::TooFewTasks(1))));
    }

    #[test]
    fn suite_mixtures_are_convex() {
        let suite = build_suite(tasks(2, 4), 1, 3).unwrap();
        let h = &suite.held_out[0];
        let (a, b) = h.parents;
        assert_eq!([a.min(b), a.max(b)], [0, 1]);
        assert!(h.weight > 0.0 && h.weight < 1.0);
        let ma = &suite.held_in[a].target_map;
        let mb = &suite.held_in[b].target_map;
        for i in 0..16 {
            let expect = h.weight * ma.data()[i] + (1.0 - h.weight) * mb.data()[i];
            assert!((h.task.target_map.data()[i] - expect).abs() < 1e-15);
        }
        assert_eq!(suite, build_suite(tasks(2, 4), 1, 3).unwrap());
        assert!(suite.held_in.iter().all(|t| t.name != h.task.name));
        assert!(suite.held_in.iter().all(|t| t.description_text != h.task.description_text));
    }

    #[test]
    fn half_mixture_is_the_average() {
        let t = tasks(2, 3);
        let mut m = t[0].target_map.scale(0.5);
        m.add_scaled(&t[1].target_map, 0.5).unwrap();
        for (x, (a, b)) in m.data().iter().zip(t[0].target_map.data().iter().zip(t[1].target_map.data())) {
            assert!((x - (a + b) / 2.0).abs() < 1e-15);
        }
    }

    fn trace_with(names: &[&str], modules: usize, picks: &[(usize, usize, Vec<usize>)]) -> RoutingTrace {
        RoutingTrace {
            mode: Mode::Glider,
            expert_names: names.iter().map(|s| s.to_string()).collect(),
            num_modules: modules,
            s_glob: None,
            alpha: 0.0,
            softmax_after_truncation: false,
            decisions: picks
                .iter()
                .map(|(t, m, e)| RouteDecision {
                    token: *t,
                    module: *m,
                    route: TokenRoute {
                        experts: e.clone(),
                        weights: vec![0.5; e.len()],
                        scores: vec![0.0; names.len()],
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn frequencies_sum_to_k() {
        let tr = trace_with(
            &["a", "b", "c"],
            2,
            &[
                (0, 0, vec![0, 1]),
                (0, 1, vec![2, 1]),
                (1, 0, vec![1, 2]),
                (1, 1, vec![0, 2]),
            ],
        );
        for row in selection_frequency(&tr) {
            assert!((row.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_expert_heatmap_is_saturated() {
        let tr = trace_with(&["solo"], 2, &[(0, 0, vec![0]), (0, 1, vec![0])]);
        assert_eq!(selection_frequency(&tr), vec![vec![1.0], vec![1.0]]);
        let svg = heatmap_svg(&tr, Some(0));
        assert!(svg.contains("rgb(0,0,255)"));
        assert!(svg.contains("stroke=\"red\""));
        assert_eq!(svg, heatmap_svg(&tr, Some(0)));
    }

    #[test]
    fn bundle_round_trip() {
        let base = ToyBaseModel::from_seed(4, 2, 1).unwrap();
        let task = SyntheticTask::generate("t", 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let expert = crate::expert::ExpertModel::init("t", &base, 2, 1.0, &mut rng).unwrap();
        let bundle = ExpertBundle::new(&base, &task, &expert);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.json");
        bundle.save(&path).unwrap();
        let back = ExpertBundle::load(&path).unwrap();
        assert_eq!(back.task.to_task().unwrap(), task);
        assert_eq!(back.expert().unwrap(), expert);
    }

    #[test]
    fn alpha_labels() {
        assert_eq!(format_alpha(3000.0), "3000");
        assert_eq!(format_alpha(0.5), "0.5");
    }
}
