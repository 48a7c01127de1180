//! Contributor-side training: synthetic regression tasks, LoRA training, and
//! frozen-LoRA gate training with analytic gradients.
//!
//! Loss is mean-squared error over batch and output dimension between the
//! adapted network and `target_map · input`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::expert::{sigmoid, ExpertError, ExpertModel, LoraModule, ToyBaseModel};
use crate::linalg::{dot, Mat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("loss became non-finite at {phase} step {step}")]
    Diverged { phase: Phase, step: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("expert {0} has untrained adapters (B is all zeros)")]
    Untrained(String),
    #[error(transparent)]
    Expert(#[from] ExpertError),
}

impl From<crate::linalg::LinalgError> for TrainError {
    fn from(e: crate::linalg::LinalgError) -> Self {
        TrainError::Expert(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Lora,
    Gate,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Lora => "lora",
            Phase::Gate => "gate",
        })
    }
}

pub const CENTER_SCALE: f64 = 2.0;

/// Word lists for the deterministic task descriptions.
const SKILLS: [&str; 12] = [
    "rotation",
    "reflection",
    "shearing",
    "scaling",
    "projection",
    "permutation",
    "smoothing",
    "sharpening",
    "mixing",
    "inversion",
    "folding",
    "twisting",
];
const DOMAINS: [&str; 8] = [
    "sensor readings",
    "audio frames",
    "price vectors",
    "color histograms",
    "joint angles",
    "word counts",
    "pixel patches",
    "weather records",
];

/// Regression task standing in for a contributor's private dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub name: String,
    pub target_map: Mat,
    pub input_center: Vec<f64>,
    pub input_spread: f64,
    pub description_text: String,
    pub seed: u64,
}

impl SyntheticTask {
    /// Random task: Gaussian target map with `N(0, 1/d)` entries, Gaussian
    /// input cluster center, spread 0.5.
    pub fn generate(name: impl Into<String>, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let map: Vec<f64> = (0..d * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let center: Vec<f64> = (0..d)
            .map(|_| CENTER_SCALE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let skill = SKILLS[rng.random_range(0..SKILLS.len())];
        let domain = DOMAINS[rng.random_range(0..DOMAINS.len())];
        let tag: u32 = rng.random_range(0..1_000_000);
        let description_text = format!(
            "Apply the {skill} transform (variant {tag:06}) to {d}-dimensional {domain}; \
             the skill required is linear {skill} of {domain}."
        );
        Self {
            name: name.into(),
            target_map: Mat::from_vec(d, d, map).expect("finite by construction"),
            input_center: center,
            input_spread: 0.5,
            description_text,
            seed,
        }
    }

    pub fn hidden(&self) -> usize {
        self.input_center.len()
    }

    pub fn target(&self, x: &[f64]) -> Vec<f64> {
        self.target_map.matvec(x).expect("input dim matches task")
    }
}

/// `(input, target)` pairs.
pub type Batch = Vec<(Vec<f64>, Vec<f64>)>;

/// Inputs `center + spread · N(0, I)` with targets `target_map · input`.
pub fn sample_batch<R: Rng>(task: &SyntheticTask, n: usize, rng: &mut R) -> Batch {
    (0..n)
        .map(|_| {
            let x: Vec<f64> = task
                .input_center
                .iter()
                .map(|c| c + task.input_spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let y = task.target(&x);
            (x, y)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lora_steps: usize,
    pub gate_steps: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub rank: usize,
    pub lora_scaling: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lora_steps: 1000,
            gate_steps: 500,
            learning_rate: 5e-3,
            warmup_ratio: 0.06,
            batch_size: 32,
            weight_decay: 0.01,
            rank: crate::expert::DEFAULT_RANK,
            lora_scaling: crate::expert::DEFAULT_LORA_SCALING,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::BadConfig(format!(
                "warmup_ratio {} not in [0, 1)",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * self.weight_decay * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Linear warmup over `ceil(warmup_ratio · total)` steps, then constant.
pub fn warmup_lr(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warm = (warmup_ratio * total as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        base
    } else {
        base * (step + 1) as f64 / warm as f64
    }
}

/// Which parameters of the adapted network are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// `W u + b + (α_L/r) B A u`
    Lora,
    /// `W u + b + σ(vᵀu) (α_L/r) B A u`
    Gated,
}

/// Gradients of the batch loss, one entry per module.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub gate: Vec<Vec<f64>>,
}

struct ModuleCache {
    input: Vec<f64>,
    au: Vec<f64>,
    delta: Vec<f64>,
    gate: f64,
}

/// Mean-squared loss and its gradients w.r.t. every `A`, `B` and gate vector.
///
/// In [`ForwardMode::Lora`] the gate gradients are zero.
pub fn loss_and_grads(
    base: &ToyBaseModel,
    modules: &[LoraModule],
    batch: &[(Vec<f64>, Vec<f64>)],
    mode: ForwardMode,
) -> Result<(f64, Grads)> {
    let d = base.hidden();
    let m = base.num_modules();
    if modules.len() != m {
        return Err(ExpertError::DimMismatch {
            expected: m,
            got: modules.len(),
        }
        .into());
    }
    let mut grads = Grads {
        a: modules.iter().map(|md| Mat::zeros(md.rank(), d)).collect(),
        b: modules.iter().map(|md| Mat::zeros(d, md.rank())).collect(),
        gate: vec![vec![0.0; d]; m],
    };
    let norm = 1.0 / (batch.len() * d) as f64;
    let mut loss = 0.0;

    for (x, y) in batch {
        // forward
        let mut caches = Vec::with_capacity(m);
        let mut h = x.clone();
        for (i, md) in modules.iter().enumerate() {
            let layer = base.layer(i);
            let au = md.a.matvec(&h)?;
            let bau = md.b.matvec(&au)?;
            let f = md.factor();
            let delta: Vec<f64> = bau.into_iter().map(|v| f * v).collect();
            let gate = match mode {
                ForwardMode::Lora => 1.0,
                ForwardMode::Gated => {
                    let v = md.gate.as_ref().ok_or(ExpertError::MissingGate)?;
                    sigmoid(dot(v, &h))
                }
            };
            let mut z = layer.apply(&h)?;
            for (zi, di) in z.iter_mut().zip(&delta) {
                *zi += gate * di;
            }
            caches.push(ModuleCache {
                input: std::mem::take(&mut h),
                au,
                delta,
                gate,
            });
            h = z;
            if !base.is_last(i) {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        let mut dz: Vec<f64> = h
            .iter()
            .zip(y)
            .map(|(o, t)| {
                let e = o - t;
                loss += e * e;
                2.0 * e * norm
            })
            .collect();

        // backward
        for i in (0..m).rev() {
            let md = &modules[i];
            let c = &caches[i];
            let f = md.factor();
            let gf = c.gate * f;
            let bt_dz = md.b.matvec_t(&dz)?;
            {
                let gb = &mut grads.b[i];
                for r in 0..d {
                    for k in 0..md.rank() {
                        let cur = gb.get(r, k);
                        gb.set(r, k, cur + gf * dz[r] * c.au[k]);
                    }
                }
                let ga = &mut grads.a[i];
                for k in 0..md.rank() {
                    for col in 0..d {
                        let cur = ga.get(k, col);
                        ga.set(k, col, cur + gf * bt_dz[k] * c.input[col]);
                    }
                }
            }
            let mut dh = base.layer(i).weight.matvec_t(&dz)?;
            let at = md.a.matvec_t(&bt_dz)?;
            for (o, v) in dh.iter_mut().zip(&at) {
                *o += gf * v;
            }
            if mode == ForwardMode::Gated {
                let v = md.gate.as_ref().ok_or(ExpertError::MissingGate)?;
                let coef = c.gate * (1.0 - c.gate) * dot(&dz, &c.delta);
                for (gv, x) in grads.gate[i].iter_mut().zip(&c.input) {
                    *gv += coef * x;
                }
                for (o, vi) in dh.iter_mut().zip(v) {
                    *o += coef * vi;
                }
            }
            if i > 0 {
                // input of module i is tanh of module i-1's output
                dz = dh
                    .iter()
                    .zip(&c.input)
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect();
            }
        }
    }
    Ok((loss * norm, grads))
}

/// Batch loss of the adapted network (no gradients).
pub fn batch_loss(
    base: &ToyBaseModel,
    modules: &[LoraModule],
    batch: &[(Vec<f64>, Vec<f64>)],
    mode: ForwardMode,
) -> Result<f64> {
    let expert = ExpertModel::new("", modules.to_vec());
    mse(batch, |x| match mode {
        ForwardMode::Lora => Ok(expert.forward(base, x)?),
        ForwardMode::Gated => Ok(expert.gated_network_forward(base, x)?),
    })
}

/// Mean-squared error of `f` over a batch.
pub fn mse<F>(batch: &[(Vec<f64>, Vec<f64>)], mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in batch {
        let out = f(x)?;
        total += out.iter().zip(y).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
        count += y.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Loss of the unadapted base model.
pub fn baseline_loss(base: &ToyBaseModel, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    mse(batch, |x| Ok(base.forward(x)?.0))
}

/// Flattens `A` then `B` of every module.
pub fn flatten_adapters(modules: &[LoraModule]) -> Vec<f64> {
    let mut out = Vec::new();
    for m in modules {
        out.extend_from_slice(m.a.data());
        out.extend_from_slice(m.b.data());
    }
    out
}

pub fn unflatten_adapters(modules: &mut [LoraModule], flat: &[f64]) {
    let mut off = 0;
    for m in modules {
        let na = m.a.data().len();
        m.a.data_mut().copy_from_slice(&flat[off..off + na]);
        off += na;
        let nb = m.b.data().len();
        m.b.data_mut().copy_from_slice(&flat[off..off + nb]);
        off += nb;
    }
}

pub fn flatten_adapter_grads(g: &Grads) -> Vec<f64> {
    let mut out = Vec::new();
    for (a, b) in g.a.iter().zip(&g.b) {
        out.extend_from_slice(a.data());
        out.extend_from_slice(b.data());
    }
    out
}

pub fn flatten_gates(modules: &[LoraModule]) -> Vec<f64> {
    modules
        .iter()
        .flat_map(|m| m.gate.clone().unwrap_or_else(|| vec![0.0; m.hidden()]))
        .collect()
}

pub fn unflatten_gates(modules: &mut [LoraModule], flat: &[f64]) {
    let mut off = 0;
    for m in modules {
        let d = m.hidden();
        m.gate = Some(flat[off..off + d].to_vec());
        off += d;
    }
}

/// Central-difference gradient check; returns the maximum relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(loss_fn: F, params: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one analytic entry per parameter");
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss_fn(&p);
        p[i] = orig - h;
        let down = loss_fn(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// One `(phase, step, loss)` record per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,step,loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{:.12e}\n", r.phase, r.step, r.loss));
        }
        out
    }

    pub fn losses(&self, phase: Phase) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.loss)
            .collect()
    }
}

fn rng_for(cfg: &TrainConfig, task: &SyntheticTask, phase: Phase) -> ChaCha8Rng {
    let salt = match phase {
        Phase::Lora => 0x10a4,
        Phase::Gate => 0x6a7e,
    };
    ChaCha8Rng::seed_from_u64(cfg.seed ^ task.seed.rotate_left(17) ^ salt)
}

/// Trains a fresh LoRA expert on `task` with the base frozen.
pub fn train_lora(
    base: &ToyBaseModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<(ExpertModel, TrainLog)> {
    cfg.validate()?;
    let mut rng = rng_for(cfg, task, Phase::Lora);
    let mut expert = ExpertModel::init(
        task.name.clone(),
        base,
        cfg.rank,
        cfg.lora_scaling,
        &mut rng,
    )?;
    let mut params = flatten_adapters(&expert.modules);
    let mut opt = AdamW::new(params.len(), cfg.weight_decay);
    let mut log = TrainLog::default();
    for step in 0..cfg.lora_steps {
        let batch = sample_batch(task, cfg.batch_size, &mut rng);
        let (loss, grads) = loss_and_grads(base, &expert.modules, &batch, ForwardMode::Lora)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                phase: Phase::Lora,
                step,
            });
        }
        log.records.push(LossRecord {
            phase: Phase::Lora,
            step,
            loss,
        });
        let lr = warmup_lr(cfg.learning_rate, step, cfg.lora_steps, cfg.warmup_ratio);
        opt.step(&mut params, &flatten_adapter_grads(&grads), lr);
        unflatten_adapters(&mut expert.modules, &params);
    }
    if !params.iter().all(|p| p.is_finite()) {
        return Err(TrainError::Diverged {
            phase: Phase::Lora,
            step: cfg.lora_steps,
        });
    }
    Ok((expert, log))
}

/// Trains one gate vector per module with `A` and `B` frozen. Gates start
/// at zero (σ = 0.5).
pub fn train_gate(
    expert: &ExpertModel,
    base: &ToyBaseModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<(ExpertModel, TrainLog)> {
    cfg.validate()?;
    expert.check_compatible(base)?;
    if expert.modules.iter().all(|m| m.b.data().iter().all(|v| *v == 0.0)) && cfg.gate_steps > 0 {
        return Err(TrainError::Untrained(expert.name.clone()));
    }
    let mut rng = rng_for(cfg, task, Phase::Gate);
    let mut out = expert.clone();
    for m in &mut out.modules {
        m.gate = Some(vec![0.0; m.hidden()]);
    }
    let mut params = flatten_gates(&out.modules);
    let mut opt = AdamW::new(params.len(), cfg.weight_decay);
    let mut log = TrainLog::default();
    for step in 0..cfg.gate_steps {
        let batch = sample_batch(task, cfg.batch_size, &mut rng);
        let (loss, grads) = loss_and_grads(base, &out.modules, &batch, ForwardMode::Gated)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                phase: Phase::Gate,
                step,
            });
        }
        log.records.push(LossRecord {
            phase: Phase::Gate,
            step,
            loss,
        });
        let lr = warmup_lr(cfg.learning_rate, step, cfg.gate_steps, cfg.warmup_ratio);
        let flat: Vec<f64> = grads.gate.concat();
        opt.step(&mut params, &flat, lr);
        unflatten_gates(&mut out.modules, &params);
    }
    Ok((out, log))
}

/// LoRA training followed by gate training; logs are concatenated.
pub fn train_expert(
    base: &ToyBaseModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<(ExpertModel, TrainLog)> {
    let (expert, mut log) = train_lora(base, task, cfg)?;
    let (expert, gate_log) = train_gate(&expert, base, task, cfg)?;
    log.records.extend(gate_log.records);
    Ok((expert, log))
}

/// Fixed evaluation batch for a task, independent of the training stream.
pub fn eval_batch(task: &SyntheticTask, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ task.seed.rotate_left(29) ^ 0xe7a1);
    sample_batch(task, n, &mut rng)
}
