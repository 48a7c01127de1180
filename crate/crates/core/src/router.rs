//! Token-level routing over an expert pool.
//!
//! GLIDER combines a per-query global score (instruction embedding against
//! each expert's global vector) with per-token local scores (standardized
//! activation against each expert's standardized gate). The baseline modes
//! share the same dispatch path so their outputs are directly comparable.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::expert::{ExpertError, ExpertModel, Layer, ToyBaseModel};
use crate::linalg::{
    self, rowwise_cosine, softmax, standardize, svd_top_right_seeded, top_k_indices, top_p_indices,
    LinalgError, Mat, SVD_MAX_ITER, SVD_TOL,
};
use crate::pool::ExpertPool;

pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_GAMMA: f64 = 100.0;
pub const DEFAULT_BETA: f64 = 3.0;
pub const DEFAULT_TOP_K: usize = 2;

/// LoraHub coefficients are kept inside `[-W_BOUND, W_BOUND]`.
pub const LORAHUB_W_BOUND: f64 = 1.5;
const LORAHUB_SIGMA0: f64 = 0.5;
const LORAHUB_SIGMA_MIN: f64 = 1e-3;
const ARROW_SVD_ATTEMPTS: u64 = 3;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("pool has no experts")]
    EmptyPool,
    #[error("expert {expert:?} has no gate vector at module {module}")]
    MissingGate { expert: String, module: usize },
    #[error("expert {expert:?} has no global vector")]
    MissingGlobal { expert: String },
    #[error("expert {expert:?}, module {module}: {source}")]
    Degenerate {
        expert: String,
        module: usize,
        source: LinalgError,
    },
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("routers were built for pool revision {built}, pool is at {current}")]
    Stale { built: u64, current: u64 },
    #[error("invalid routing config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
}

pub type Result<T> = std::result::Result<T, RouterError>;

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(RouterError::DimMismatch { what, expected, got })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Glider,
    Phatgoose,
    Arrow,
    Merge,
    LoraHub,
    Oracle,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Glider,
        Mode::Phatgoose,
        Mode::Arrow,
        Mode::Merge,
        Mode::LoraHub,
        Mode::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Glider => "glider",
            Mode::Phatgoose => "phatgoose",
            Mode::Arrow => "arrow",
            Mode::Merge => "merge",
            Mode::LoraHub => "lorahub",
            Mode::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = RouterError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| RouterError::BadConfig(format!("unknown mode {s:?}")))
    }
}

/// Which experts a token is dispatched to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    TopK(usize),
    /// Smallest prefix whose softmax mass exceeds the fraction.
    TopP(f64),
    /// Every expert, weighted by the full softmax.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingConfig {
    /// Cosine threshold on the best global score.
    pub p: f64,
    pub gamma: f64,
    pub beta: f64,
    pub selection: Selection,
    pub mode: Mode,
    /// Fixed α in place of the thresholded rule (sweeps).
    pub alpha_override: Option<f64>,
    /// Softmax over the selected experts only, instead of selecting from
    /// the full softmax. Ablation only.
    pub softmax_after_truncation: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            p: DEFAULT_THRESHOLD,
            gamma: DEFAULT_GAMMA,
            beta: DEFAULT_BETA,
            selection: Selection::TopK(DEFAULT_TOP_K),
            mode: Mode::Glider,
            alpha_override: None,
            softmax_after_truncation: false,
        }
    }
}

impl RoutingConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RouterError::BadConfig(m));
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("threshold p = {} must be in (0, 1)", self.p));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma = {} must be finite and >= 0", self.gamma));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta = {} must be finite and >= 0", self.beta));
        }
        if let Some(a) = self.alpha_override {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(format!("alpha override {a} must be finite and >= 0"));
            }
        }
        match self.selection {
            Selection::TopK(0) => bad("k must be at least 1".into()),
            Selection::TopP(p) if !(p > 0.0 && p < 1.0) => {
                bad(format!("top-p mass {p} must be in (0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

/// Per module, the standardized gate vectors of every expert (`N × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRouter {
    pub l: Vec<Mat>,
}

/// Expert global vectors, one unit-norm row per expert (`N × d_g`).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalRouter {
    pub g: Mat,
}

/// Routers built from one pool revision.
#[derive(Debug)]
pub struct Routers {
    pub local: LocalRouter,
    pub global: Option<GlobalRouter>,
    revision: u64,
    len: usize,
    global_evals: AtomicUsize,
}

impl Routers {
    /// Local and global routers; every expert needs gates and a global
    /// vector.
    pub fn build(pool: &ExpertPool) -> Result<Self> {
        let (local, global) = build_routers(pool)?;
        Ok(Self::assemble(pool, local, Some(global)))
    }

    /// Local router only, for modes that ignore global vectors.
    pub fn build_local(pool: &ExpertPool) -> Result<Self> {
        let local = build_local_router(pool)?;
        Ok(Self::assemble(pool, local, None))
    }

    fn assemble(pool: &ExpertPool, local: LocalRouter, global: Option<GlobalRouter>) -> Self {
        Self {
            local,
            global,
            revision: pool.revision(),
            len: pool.len(),
            global_evals: AtomicUsize::new(0),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.len
    }

    pub fn ensure_fresh(&self, pool: &ExpertPool) -> Result<()> {
        if self.revision != pool.revision() || self.len != pool.len() {
            return Err(RouterError::Stale {
                built: self.revision,
                current: pool.revision(),
            });
        }
        Ok(())
    }

    /// Number of global score computations so far.
    pub fn global_score_calls(&self) -> usize {
        self.global_evals.load(Ordering::Relaxed)
    }

    /// Admits a query: computes `s_glob` and α once.
    pub fn query_context(&self, q_u: &[f64], cfg: &RoutingConfig) -> Result<QueryContext> {
        let global = self.global.as_ref().ok_or_else(|| RouterError::BadConfig(
            "routers were built without global vectors".into(),
        ))?;
        self.global_evals.fetch_add(1, Ordering::Relaxed);
        let s_glob = global_scores(global, q_u)?;
        let alpha = alpha_scale(&s_glob, cfg);
        Ok(QueryContext { s_glob, alpha })
    }
}

pub fn build_local_router(pool: &ExpertPool) -> Result<LocalRouter> {
    if pool.is_empty() {
        return Err(RouterError::EmptyPool);
    }
    let d = pool.base().hidden();
    let mut l = Vec::with_capacity(pool.base().num_modules());
    for m in 0..pool.base().num_modules() {
        let mut rows = Vec::with_capacity(pool.len() * d);
        for e in pool.experts() {
            let gate = e.modules[m].gate.as_ref().ok_or_else(|| RouterError::MissingGate {
                expert: e.name.clone(),
                module: m,
            })?;
            let v = standardize(gate).map_err(|source| RouterError::Degenerate {
                expert: e.name.clone(),
                module: m,
                source,
            })?;
            rows.extend(v);
        }
        l.push(Mat::from_vec(pool.len(), d, rows)?);
    }
    Ok(LocalRouter { l })
}

/// Stacks standardized gates and global vectors in pool order.
pub fn build_routers(pool: &ExpertPool) -> Result<(LocalRouter, GlobalRouter)> {
    let local = build_local_router(pool)?;
    let mut rows = Vec::with_capacity(pool.len() * pool.d_g());
    for e in pool.experts() {
        let g = e.global_vector.as_ref().ok_or_else(|| RouterError::MissingGlobal {
            expert: e.name.clone(),
        })?;
        check_dim("global vector width", pool.d_g(), g.len())?;
        rows.extend_from_slice(g);
    }
    let g = Mat::from_vec(pool.len(), pool.d_g(), rows)?;
    Ok((local, GlobalRouter { g }))
}

/// `cos-sim(G, q_u)`
pub fn global_scores(global: &GlobalRouter, q_u: &[f64]) -> Result<Vec<f64>> {
    check_dim("query embedding width", global.g.cols(), q_u.len())?;
    Ok(rowwise_cosine(&global.g, q_u)?)
}

/// `γ·𝕀[max(s_glob) > p] + β`, or the configured override.
pub fn alpha_scale(s_glob: &[f64], cfg: &RoutingConfig) -> f64 {
    if let Some(a) = cfg.alpha_override {
        return a;
    }
    let max = s_glob.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > cfg.p {
        cfg.gamma + cfg.beta
    } else {
        cfg.beta
    }
}

/// `α·s_glob + s_loc/√N` with α from [`alpha_scale`].
pub fn combined_scores(s_glob: &[f64], s_loc: &[f64], cfg: &RoutingConfig, n: usize) -> Result<Vec<f64>> {
    combine_with_alpha(s_glob, s_loc, alpha_scale(s_glob, cfg), n)
}

pub fn combine_with_alpha(s_glob: &[f64], s_loc: &[f64], alpha: f64, n: usize) -> Result<Vec<f64>> {
    check_dim("global scores", n, s_glob.len())?;
    check_dim("local scores", n, s_loc.len())?;
    let scale = (n as f64).sqrt();
    Ok(s_glob
        .iter()
        .zip(s_loc)
        .map(|(g, l)| alpha * g + l / scale)
        .collect())
}

/// Cosine of the standardized token against every standardized gate of
/// module `m`. Constant tokens score 0 everywhere.
pub fn local_scores(local: &LocalRouter, m: usize, u: &[f64]) -> Result<Vec<f64>> {
    let l = &local.l[m];
    check_dim("token width", l.cols(), u.len())?;
    match standardize(u) {
        Ok(ub) => Ok(rowwise_cosine(l, &ub)?),
        Err(LinalgError::ZeroVariance) => Ok(vec![0.0; l.rows()]),
        Err(e) => Err(e.into()),
    }
}

/// Global routing state of one admitted query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    pub s_glob: Vec<f64>,
    pub alpha: f64,
}

/// One routing decision: selected experts with their weights, plus the
/// scores they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Softmax then selection. Top-k orders by score, which is the same order
/// as the softmax but immune to ties created by underflow.
pub fn select(scores: Vec<f64>, selection: Selection, softmax_after_truncation: bool) -> Result<TokenRoute> {
    let n = scores.len();
    let experts = match selection {
        Selection::TopK(k) => top_k_indices(&scores, k.min(n))?,
        Selection::TopP(p) => top_p_indices(&softmax(&scores)?, p)?,
        Selection::Dense => (0..n).collect(),
    };
    let weights = if softmax_after_truncation {
        let picked: Vec<f64> = experts.iter().map(|&i| scores[i]).collect();
        softmax(&picked)?
    } else {
        let probs = softmax(&scores)?;
        experts.iter().map(|&i| probs[i]).collect()
    };
    Ok(TokenRoute {
        experts,
        weights,
        scores,
    })
}

/// Routes one token at module `m` given the query's cached global state.
pub fn route_token(
    m: usize,
    u: &[f64],
    local: &LocalRouter,
    ctx: &QueryContext,
    cfg: &RoutingConfig,
) -> Result<TokenRoute> {
    let s_loc = local_scores(local, m, u)?;
    let s = combine_with_alpha(&ctx.s_glob, &s_loc, ctx.alpha, s_loc.len())?;
    select(s, cfg.selection, cfg.softmax_after_truncation)
}

/// `W u + b + Σ_k w_k (α_L/r) B_k A_k u` at module `m`. Contributions are
/// summed in expert-index order, so the result does not depend on the
/// order of `selected`.
pub fn moe_module_forward(
    layer: &Layer,
    experts: &[ExpertModel],
    m: usize,
    selected: &[usize],
    weights: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    check_dim("weights", selected.len(), weights.len())?;
    let mut pairs: Vec<(usize, f64)> = selected.iter().copied().zip(weights.iter().copied()).collect();
    pairs.sort_by_key(|&(k, _)| k);
    let mut out = layer.apply(u)?;
    for (k, w) in pairs {
        let module = &experts
            .get(k)
            .ok_or(RouterError::DimMismatch {
                what: "expert index",
                expected: experts.len(),
                got: k,
            })?
            .modules[m];
        check_dim("module width", out.len(), module.hidden())?;
        for (o, d) in out.iter_mut().zip(module.delta(u)?) {
            *o += w * d;
        }
    }
    Ok(out)
}

/// Routing decision recorded for one token at one module.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    pub token: usize,
    pub module: usize,
    pub route: TokenRoute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub mode: Mode,
    pub expert_names: Vec<String>,
    pub num_modules: usize,
    pub s_glob: Option<Vec<f64>>,
    pub alpha: f64,
    pub softmax_after_truncation: bool,
    pub decisions: Vec<RouteDecision>,
}

pub const TRACE_CSV_HEADER: &str = "query_id,token_id,module_id,expert_name,weight,s_glob_max,alpha";

impl RoutingTrace {
    pub fn s_glob_max(&self) -> Option<f64> {
        self.s_glob
            .as_ref()
            .map(|s| s.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    /// One row per selected expert per decision, without the header.
    pub fn write_csv_rows(&self, query_id: &str, out: &mut String) {
        use std::fmt::Write;
        let smax = self.s_glob_max().map(|v| v.to_string()).unwrap_or_default();
        for d in &self.decisions {
            for (&k, &w) in d.route.experts.iter().zip(&d.route.weights) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    csv_field(query_id),
                    d.token,
                    d.module,
                    csv_field(&self.expert_names[k]),
                    w,
                    smax,
                    self.alpha
                );
            }
        }
    }

    pub fn to_csv(&self, query_id: &str) -> String {
        let mut s = format!("{TRACE_CSV_HEADER}\n");
        self.write_csv_rows(query_id, &mut s);
        s
    }

    /// Fraction of decisions whose first choice is `expert`.
    pub fn top1_rate(&self, expert: usize) -> f64 {
        if self.decisions.is_empty() {
            return 0.0;
        }
        let hits = self
            .decisions
            .iter()
            .filter(|d| d.route.experts.first() == Some(&expert))
            .count();
        hits as f64 / self.decisions.len() as f64
    }

    /// `counts[m][j]`: how often expert `j` was selected at module `m`.
    pub fn selection_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.expert_names.len()]; self.num_modules];
        for d in &self.decisions {
            for &k in &d.route.experts {
                counts[d.module][k] += 1;
            }
        }
        counts
    }

    /// Largest gap between a logged weight and the softmax recomputed from
    /// the logged scores.
    pub fn max_weight_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for d in &self.decisions {
            let r = &d.route;
            let recomputed = if self.softmax_after_truncation {
                softmax(&r.experts.iter().map(|&i| r.scores[i]).collect::<Vec<_>>())?
            } else {
                let p = softmax(&r.scores)?;
                r.experts.iter().map(|&i| p[i]).collect()
            };
            for (a, b) in r.weights.iter().zip(recomputed) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Outputs of a routed forward pass with their trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    pub outputs: Vec<Vec<f64>>,
    pub trace: RoutingTrace,
}

/// Runs every token through the network, asking `score_fn(module, h)` for
/// the routing scores at each module. Tokens run in parallel.
fn routed_forward<F>(
    pool: &ExpertPool,
    tokens: &[Vec<f64>],
    cfg: &RoutingConfig,
    score_fn: F,
) -> Result<(Vec<Vec<f64>>, Vec<RouteDecision>)>
where
    F: Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    if pool.is_empty() {
        return Err(RouterError::EmptyPool);
    }
    let base = pool.base();
    let per_token: Vec<(Vec<f64>, Vec<RouteDecision>)> = tokens
        .par_iter()
        .enumerate()
        .map(|(t, x)| {
            let mut decisions = Vec::with_capacity(base.num_modules());
            let y = network_pass(base, x, |m, layer, h| {
                let route = select(score_fn(m, h)?, cfg.selection, cfg.softmax_after_truncation)?;
                let y = moe_module_forward(layer, pool.experts(), m, &route.experts, &route.weights, h)?;
                decisions.push(RouteDecision { token: t, module: m, route });
                Ok(y)
            })?;
            Ok((y, decisions))
        })
        .collect::<Result<_>>()?;
    let mut outputs = Vec::with_capacity(tokens.len());
    let mut decisions = Vec::with_capacity(tokens.len() * base.num_modules());
    for (y, d) in per_token {
        outputs.push(y);
        decisions.extend(d);
    }
    Ok((outputs, decisions))
}

/// The base network with `module_fn(m, layer, h)` in place of each layer.
fn network_pass<F>(base: &ToyBaseModel, u: &[f64], mut module_fn: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &Layer, &[f64]) -> Result<Vec<f64>>,
{
    check_dim("token width", base.hidden(), u.len())?;
    let mut h = u.to_vec();
    for (m, layer) in base.layers().iter().enumerate() {
        h = module_fn(m, layer, &h)?;
        if !base.is_last(m) {
            h.iter_mut().for_each(|v| *v = v.tanh());
        }
    }
    Ok(h)
}

/// Mean squared error over every output coordinate of `batch`.
pub fn batch_mse<F>(batch: &[(Vec<f64>, Vec<f64>)], mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in batch {
        let out = f(x)?;
        check_dim("output width", y.len(), out.len())?;
        total += out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
        count += y.len();
    }
    Ok(total / count.max(1) as f64)
}

fn trace(pool: &ExpertPool, mode: Mode, ctx: Option<&QueryContext>, cfg: &RoutingConfig, decisions: Vec<RouteDecision>) -> RoutingTrace {
    RoutingTrace {
        mode,
        expert_names: pool.experts().iter().map(|e| e.name.clone()).collect(),
        num_modules: pool.base().num_modules(),
        s_glob: ctx.map(|c| c.s_glob.clone()),
        alpha: ctx.map_or(0.0, |c| c.alpha),
        softmax_after_truncation: cfg.softmax_after_truncation,
        decisions,
    }
}

/// GLIDER inference for one query: `s_glob` is computed once from `q_u`
/// and reused at every module for every token.
pub fn glider_forward(
    pool: &ExpertPool,
    routers: &Routers,
    tokens: &[Vec<f64>],
    q_u: &[f64],
    cfg: &RoutingConfig,
) -> Result<Routed> {
    routers.ensure_fresh(pool)?;
    cfg.validate()?;
    let ctx = routers.query_context(q_u, cfg)?;
    glider_forward_ctx(pool, routers, tokens, &ctx, cfg)
}

/// [`glider_forward`] with an already admitted query.
pub fn glider_forward_ctx(
    pool: &ExpertPool,
    routers: &Routers,
    tokens: &[Vec<f64>],
    ctx: &QueryContext,
    cfg: &RoutingConfig,
) -> Result<Routed> {
    routers.ensure_fresh(pool)?;
    let (outputs, decisions) = routed_forward(pool, tokens, cfg, |m, h| {
        let s_loc = local_scores(&routers.local, m, h)?;
        combine_with_alpha(&ctx.s_glob, &s_loc, ctx.alpha, s_loc.len())
    })?;
    Ok(Routed {
        outputs,
        trace: trace(pool, Mode::Glider, Some(ctx), cfg, decisions),
    })
}

/// Local routing only: the global term is dropped (α = 0).
pub fn phatgoose_forward(
    pool: &ExpertPool,
    routers: &Routers,
    tokens: &[Vec<f64>],
    cfg: &RoutingConfig,
) -> Result<Routed> {
    routers.ensure_fresh(pool)?;
    let n = pool.len();
    let zeros = vec![0.0; n];
    let (outputs, decisions) = routed_forward(pool, tokens, cfg, |m, h| {
        let s_loc = local_scores(&routers.local, m, h)?;
        combine_with_alpha(&zeros, &s_loc, 0.0, n)
    })?;
    Ok(Routed {
        outputs,
        trace: trace(pool, Mode::Phatgoose, None, cfg, decisions),
    })
}

/// Per module, the leading right singular vector of every expert's update.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrowRouter {
    pub v: Vec<Mat>,
}

impl ArrowRouter {
    pub fn build(pool: &ExpertPool) -> Result<Self> {
        if pool.is_empty() {
            return Err(RouterError::EmptyPool);
        }
        let d = pool.base().hidden();
        let mut v = Vec::with_capacity(pool.base().num_modules());
        for m in 0..pool.base().num_modules() {
            let mut rows = Vec::with_capacity(pool.len() * d);
            for e in pool.experts() {
                let ba = e.modules[m].b.matmul(&e.modules[m].a)?;
                rows.extend(leading_right_vector(&ba).map_err(|source| RouterError::Degenerate {
                    expert: e.name.clone(),
                    module: m,
                    source,
                })?);
            }
            v.push(Mat::from_vec(pool.len(), d, rows)?);
        }
        Ok(Self { v })
    }

    /// `|⟨u, v_c⟩|` for every expert at module `m`.
    pub fn scores(&self, m: usize, u: &[f64]) -> Result<Vec<f64>> {
        check_dim("token width", self.v[m].cols(), u.len())?;
        Ok(self.v[m].row_iter().map(|r| linalg::dot(r, u).abs()).collect())
    }
}

/// Power iteration with a few restarts from fresh seeds.
fn leading_right_vector(m: &Mat) -> std::result::Result<Vec<f64>, LinalgError> {
    let mut last = LinalgError::NoConvergence(SVD_MAX_ITER);
    for attempt in 0..ARROW_SVD_ATTEMPTS {
        match svd_top_right_seeded(m, SVD_TOL, SVD_MAX_ITER, 0xa770_0000 + attempt) {
            Ok((_, v)) => return Ok(v),
            Err(e @ LinalgError::NoConvergence(_)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Routing on `|⟨u, v_c⟩|` with the module's SVD gating vectors.
pub fn arrow_forward(
    pool: &ExpertPool,
    arrow: &ArrowRouter,
    tokens: &[Vec<f64>],
    cfg: &RoutingConfig,
) -> Result<Routed> {
    check_dim("arrow router rows", pool.len(), arrow.v.first().map_or(0, Mat::rows))?;
    let (outputs, decisions) = routed_forward(pool, tokens, cfg, |m, h| arrow.scores(m, h))?;
    Ok(Routed {
        outputs,
        trace: trace(pool, Mode::Arrow, None, cfg, decisions),
    })
}

/// One dense update per module applied to every token.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedAdapter {
    pub delta: Vec<Mat>,
}

impl MergedAdapter {
    /// `Σ_c w_c (α_L/r) B_c A_c` per module.
    pub fn weighted(pool: &ExpertPool, w: &[f64]) -> Result<Self> {
        Self::from_deltas(&expert_deltas(pool)?, w)
    }

    /// Unweighted average of every expert's update.
    pub fn average(pool: &ExpertPool) -> Result<Self> {
        if pool.is_empty() {
            return Err(RouterError::EmptyPool);
        }
        let w = vec![1.0 / pool.len() as f64; pool.len()];
        Self::weighted(pool, &w)
    }

    fn from_deltas(deltas: &[Vec<Mat>], w: &[f64]) -> Result<Self> {
        check_dim("mixing coefficients", deltas.len(), w.len())?;
        let first = deltas.first().ok_or(RouterError::EmptyPool)?;
        let mut delta: Vec<Mat> = first.iter().map(|d| Mat::zeros(d.rows(), d.cols())).collect();
        for (per_module, &wc) in deltas.iter().zip(w) {
            for (acc, d) in delta.iter_mut().zip(per_module) {
                acc.add_scaled(d, wc)?;
            }
        }
        Ok(Self { delta })
    }

    pub fn forward(&self, base: &ToyBaseModel, u: &[f64]) -> Result<Vec<f64>> {
        check_dim("merged modules", base.num_modules(), self.delta.len())?;
        network_pass(base, u, |m, layer, h| {
            let mut out = layer.apply(h)?;
            for (o, d) in out.iter_mut().zip(self.delta[m].matvec(h)?) {
                *o += d;
            }
            Ok(out)
        })
    }
}

/// `(α_L/r) B A` for every expert and module.
fn expert_deltas(pool: &ExpertPool) -> Result<Vec<Vec<Mat>>> {
    let shape = (pool.base().hidden(), pool.base().hidden());
    pool.experts()
        .iter()
        .map(|e| {
            e.modules
                .iter()
                .map(|m| {
                    let d = m.delta_weight()?;
                    if d.shape() != shape {
                        return Err(RouterError::DimMismatch {
                            what: "merged update shape",
                            expected: shape.0,
                            got: d.rows(),
                        });
                    }
                    Ok(d)
                })
                .collect()
        })
        .collect()
}

pub fn merge_forward(pool: &ExpertPool, tokens: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let merged = MergedAdapter::average(pool)?;
    tokens.iter().map(|x| merged.forward(pool.base(), x)).collect()
}

/// Result of a LoraHub coefficient search.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraHubFit {
    pub weights: Vec<f64>,
    pub loss: f64,
    pub initial_loss: f64,
    pub evaluations: usize,
}

/// Gradient-free fit of mixing coefficients on a few-shot batch: a (1+1)
/// evolution strategy with the one-fifth success rule, restarted from a
/// random point whenever the step size collapses. `budget` counts loss
/// evaluations, starting with the uniform point `1/N`.
pub fn lorahub_fit<R: Rng>(
    pool: &ExpertPool,
    batch: &[(Vec<f64>, Vec<f64>)],
    budget: usize,
    rng: &mut R,
) -> Result<LoraHubFit> {
    if budget == 0 {
        return Err(RouterError::BadConfig("budget must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(RouterError::EmptyPool);
    }
    let deltas = expert_deltas(pool)?;
    let base = pool.base();
    let loss = |w: &[f64]| -> Result<f64> {
        let merged = MergedAdapter::from_deltas(&deltas, w)?;
        batch_mse(batch, |x| merged.forward(base, x))
    };
    let n = pool.len();
    let mut current = vec![1.0 / n as f64; n];
    let mut current_loss = loss(&current)?;
    let initial_loss = current_loss;
    let mut best = (current.clone(), current_loss);
    let mut evaluations = 1;
    let mut sigma = LORAHUB_SIGMA0;
    let up = 1.5f64;
    let down = up.powf(-0.25);
    while evaluations < budget {
        if sigma < LORAHUB_SIGMA_MIN {
            current = (0..n)
                .map(|_| rng.random_range(-LORAHUB_W_BOUND..=LORAHUB_W_BOUND))
                .collect();
            current_loss = loss(&current)?;
            evaluations += 1;
            sigma = LORAHUB_SIGMA0;
        } else {
            let candidate: Vec<f64> = current
                .iter()
                .map(|&w| {
                    let z: f64 = StandardNormal.sample(rng);
                    (w + sigma * z).clamp(-LORAHUB_W_BOUND, LORAHUB_W_BOUND)
                })
                .collect();
            let l = loss(&candidate)?;
            evaluations += 1;
            if l <= current_loss {
                current = candidate;
                current_loss = l;
                sigma *= up;
            } else {
                sigma *= down;
            }
        }
        if current_loss < best.1 {
            best = (current.clone(), current_loss);
        }
    }
    Ok(LoraHubFit {
        weights: best.0,
        loss: best.1,
        initial_loss,
        evaluations,
    })
}

pub fn lorahub_forward(pool: &ExpertPool, w: &[f64], tokens: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let merged = MergedAdapter::weighted(pool, w)?;
    tokens.iter().map(|x| merged.forward(pool.base(), x)).collect()
}

/// Loss of every expert on `batch`.
pub fn per_expert_losses(pool: &ExpertPool, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
    pool.experts()
        .iter()
        .map(|e| batch_mse(batch, |x| Ok(e.forward(pool.base(), x)?)))
        .collect()
}

/// Index of the expert with the lowest loss on `batch`; ties go to the
/// lower index.
pub fn oracle_select(pool: &ExpertPool, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<usize> {
    if pool.is_empty() {
        return Err(RouterError::EmptyPool);
    }
    let losses = per_expert_losses(pool, batch)?;
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn oracle_forward(pool: &ExpertPool, expert: usize, tokens: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let e = pool.experts().get(expert).ok_or(RouterError::DimMismatch {
        what: "expert index",
        expected: pool.len(),
        got: expert,
    })?;
    tokens
        .iter()
        .map(|x| e.forward(pool.base(), x).map_err(Into::into))
        .collect()
}
