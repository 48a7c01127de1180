//! Toy frozen base model and LoRA expert modules.
//!
//! The base model is a stack of `m` dense `d × d` linear modules with `tanh`
//! between them (not after the last). Every linear module is a site where an
//! expert attaches one low-rank update `(α_L / r) · B A`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{dot, LinalgError, Mat};

pub const DEFAULT_HIDDEN: usize = 16;
pub const DEFAULT_MODULES: usize = 4;
pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_LORA_SCALING: f64 = 1.0;

/// Nonlinearity tag written into pool files.
pub const NONLINEARITY_TANH: &str = "tanh";

const BIAS_SCALE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpertError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("module has no gate vector")]
    MissingGate,
    #[error("invalid rank {rank} for hidden width {d}")]
    BadRank { rank: usize, d: usize },
    #[error("model needs at least one module")]
    NoModules,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ExpertError>;

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(ExpertError::DimMismatch { expected, got })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One frozen linear module: `W u + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weight: Mat, bias: Vec<f64>) -> Result<Self> {
        check_dim(weight.rows(), bias.len())?;
        Ok(Self { weight, bias })
    }

    pub fn without_bias(weight: Mat) -> Self {
        let bias = vec![0.0; weight.rows()];
        Self { weight, bias }
    }

    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weight.matvec(u)?;
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(out)
    }
}

/// Frozen feed-forward stand-in for a pretrained base model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBaseModel {
    d: usize,
    seed: u64,
    layers: Vec<Layer>,
}

impl ToyBaseModel {
    /// Seeded unit-variance uniform init (`±√3`) scaled by `1/√d`; identical
    /// seeds give bit-identical models.
    pub fn from_seed(d: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(ExpertError::NoModules);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (3.0 / d as f64).sqrt();
        let layers = (0..m)
            .map(|_| {
                let w: Vec<f64> = (0..d * d)
                    .map(|_| rng.random_range(-1.0..1.0) * scale)
                    .collect();
                let b: Vec<f64> = (0..d)
                    .map(|_| rng.random_range(-1.0..1.0) * BIAS_SCALE)
                    .collect();
                Layer::new(Mat::from_vec(d, d, w)?, b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { d, seed, layers })
    }

    /// Builds a model from explicit layers; the seed is recorded as 0.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let d = layers.first().ok_or(ExpertError::NoModules)?.weight.cols();
        for l in &layers {
            check_dim(d, l.weight.cols())?;
            check_dim(d, l.weight.rows())?;
        }
        Ok(Self { d, seed: 0, layers })
    }

    pub fn hidden(&self) -> usize {
        self.d
    }

    pub fn num_modules(&self) -> usize {
        self.layers.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub fn is_last(&self, i: usize) -> bool {
        i + 1 == self.layers.len()
    }

    /// Returns the output and the input seen by every module.
    pub fn forward(&self, u: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        check_dim(self.d, u.len())?;
        let mut h = u.to_vec();
        let mut activations = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h)?;
            activations.push(std::mem::replace(&mut h, z));
            if !self.is_last(i) {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok((h, activations))
    }

    /// Runs the network with `module_fn(i, layer, input)` producing each
    /// module's pre-activation output.
    pub fn forward_with<F>(&self, u: &[f64], mut module_fn: F) -> Result<Vec<f64>>
    where
        F: FnMut(usize, &Layer, &[f64]) -> Result<Vec<f64>>,
    {
        check_dim(self.d, u.len())?;
        let mut h = u.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = module_fn(i, layer, &h)?;
            if !self.is_last(i) {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        Ok(h)
    }

    /// Order-sensitive digest of every weight and bias bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut acc = Fnv::default();
        for l in &self.layers {
            acc.feed_floats(l.weight.data());
            acc.feed_floats(&l.bias);
        }
        acc.value()
    }
}

/// Plain forward pass: `(output, activations)`.
pub fn base_forward(model: &ToyBaseModel, u: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    model.forward(u)
}

/// FNV-1a over float bit patterns.
pub(crate) struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub(crate) fn feed_floats(&mut self, xs: &[f64]) {
        for x in xs {
            for b in x.to_bits().to_le_bytes() {
                self.0 ^= u64::from(b);
                self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    pub(crate) fn value(&self) -> u64 {
        self.0
    }
}

/// Low-rank update for one host layer plus its optional local gate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    /// `r × d`
    pub a: Mat,
    /// `d × r`
    pub b: Mat,
    pub lora_scaling: f64,
    pub gate: Option<Vec<f64>>,
}

impl LoraModule {
    pub fn new(a: Mat, b: Mat, lora_scaling: f64) -> Result<Self> {
        let rank = a.rows();
        let d = a.cols();
        if rank == 0 || rank > d {
            return Err(ExpertError::BadRank { rank, d });
        }
        check_dim(rank, b.cols())?;
        check_dim(d, b.rows())?;
        Ok(Self {
            a,
            b,
            lora_scaling,
            gate: None,
        })
    }

    /// Standard LoRA init: `A` uniform in `±1/√d`, `B = 0`.
    pub fn init<R: Rng>(d: usize, rank: usize, lora_scaling: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d {
            return Err(ExpertError::BadRank { rank, d });
        }
        let bound = 1.0 / (d as f64).sqrt();
        let a: Vec<f64> = (0..rank * d)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::new(Mat::from_vec(rank, d, a)?, Mat::zeros(d, rank), lora_scaling)
    }

    pub fn with_gate(mut self, gate: Vec<f64>) -> Result<Self> {
        check_dim(self.hidden(), gate.len())?;
        self.gate = Some(gate);
        Ok(self)
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn hidden(&self) -> usize {
        self.a.cols()
    }

    /// `α_L / r`
    pub fn factor(&self) -> f64 {
        self.lora_scaling / self.rank() as f64
    }

    /// `(α_L / r) · B A u`
    pub fn delta(&self, u: &[f64]) -> Result<Vec<f64>> {
        let au = self.a.matvec(u)?;
        let bau = self.b.matvec(&au)?;
        let f = self.factor();
        Ok(bau.into_iter().map(|v| f * v).collect())
    }

    /// Dense `(α_L / r) · B A`.
    pub fn delta_weight(&self) -> Result<Mat> {
        Ok(self.b.matmul(&self.a)?.scale(self.factor()))
    }

    /// `σ(vᵀu)`
    pub fn gate_value(&self, u: &[f64]) -> Result<f64> {
        let v = self.gate.as_ref().ok_or(ExpertError::MissingGate)?;
        check_dim(v.len(), u.len())?;
        Ok(sigmoid(dot(v, u)))
    }
}

/// `W u + b + (α_L / r) · B A u`
pub fn lora_forward(layer: &Layer, module: &LoraModule, u: &[f64]) -> Result<Vec<f64>> {
    check_dim(layer.weight.rows(), module.hidden())?;
    let mut out = layer.apply(u)?;
    for (o, d) in out.iter_mut().zip(module.delta(u)?) {
        *o += d;
    }
    Ok(out)
}

/// `W u + b + σ(vᵀu) · (α_L / r) · B A u`
pub fn gated_forward(layer: &Layer, module: &LoraModule, u: &[f64]) -> Result<Vec<f64>> {
    let g = module.gate_value(u)?;
    gated_forward_with(layer, module, u, g)
}

/// Gated forward with an explicit gate value in place of `σ(vᵀu)`.
pub fn gated_forward_with(layer: &Layer, module: &LoraModule, u: &[f64], g: f64) -> Result<Vec<f64>> {
    check_dim(layer.weight.rows(), module.hidden())?;
    let mut out = layer.apply(u)?;
    for (o, d) in out.iter_mut().zip(module.delta(u)?) {
        *o += g * d;
    }
    Ok(out)
}

/// A named expert: one [`LoraModule`] per base layer plus its global
/// routing data.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub name: String,
    pub modules: Vec<LoraModule>,
    pub global_vector: Option<Vec<f64>>,
    pub task_description: String,
}

impl ExpertModel {
    pub fn new(name: impl Into<String>, modules: Vec<LoraModule>) -> Self {
        Self {
            name: name.into(),
            modules,
            global_vector: None,
            task_description: String::new(),
        }
    }

    /// Fresh expert sized for `base`.
    pub fn init<R: Rng>(
        name: impl Into<String>,
        base: &ToyBaseModel,
        rank: usize,
        lora_scaling: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let modules = (0..base.num_modules())
            .map(|_| LoraModule::init(base.hidden(), rank, lora_scaling, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(name, modules))
    }

    pub fn check_compatible(&self, base: &ToyBaseModel) -> Result<()> {
        check_dim(base.num_modules(), self.modules.len())?;
        for m in &self.modules {
            check_dim(base.hidden(), m.hidden())?;
        }
        Ok(())
    }

    pub fn has_gates(&self) -> bool {
        self.modules.iter().all(|m| m.gate.is_some())
    }

    /// Full network pass with this expert's update at every module.
    pub fn forward(&self, base: &ToyBaseModel, u: &[f64]) -> Result<Vec<f64>> {
        self.check_compatible(base)?;
        base.forward_with(u, |i, layer, h| lora_forward(layer, &self.modules[i], h))
    }

    /// Full network pass through the gated modules.
    pub fn gated_network_forward(&self, base: &ToyBaseModel, u: &[f64]) -> Result<Vec<f64>> {
        self.check_compatible(base)?;
        base.forward_with(u, |i, layer, h| gated_forward(layer, &self.modules[i], h))
    }

    /// Digest over every `A` and `B` bit pattern.
    pub fn adapter_checksum(&self) -> u64 {
        let mut acc = Fnv::default();
        for m in &self.modules {
            acc.feed_floats(m.a.data());
            acc.feed_floats(m.b.data());
        }
        acc.value()
    }

    /// Sets the global routing vector, normalizing it to unit length.
    pub fn set_global_vector(&mut self, g: Vec<f64>) -> Result<()> {
        let n = crate::linalg::norm(&g);
        if !(n > crate::linalg::EPS) || !g.iter().all(|v| v.is_finite()) {
            return Err(LinalgError::ZeroNorm { row: None }.into());
        }
        self.global_vector = Some(g.into_iter().map(|v| v / n).collect());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_module() -> LoraModule {
        let b = Mat::from_rows(&[[1.0], [0.0]]).unwrap();
        let a = Mat::from_rows(&[[0.0, 1.0]]).unwrap();
        LoraModule::new(a, b, 1.0).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let zero = Layer::new(Mat::zeros(3, 3), vec![0.0; 3]).unwrap();
        let model = ToyBaseModel::from_layers(vec![zero.clone(), zero]).unwrap();
        let (out, acts) = base_forward(&model, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
        assert_eq!(acts, vec![vec![1.0, -2.0, 3.0], vec![0.0; 3]]);
    }

    #[test]
    fn identity_single_module() {
        let model = ToyBaseModel::from_layers(vec![Layer::without_bias(Mat::identity(2))]).unwrap();
        assert_eq!(base_forward(&model, &[1.0, 2.0]).unwrap().0, vec![1.0, 2.0]);
    }

    #[test]
    fn seeded_models_are_bit_identical() {
        let a = ToyBaseModel::from_seed(16, 4, 11).unwrap();
        let b = ToyBaseModel::from_seed(16, 4, 11).unwrap();
        let c = ToyBaseModel::from_seed(16, 4, 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert!(ToyBaseModel::from_seed(4, 0, 1).is_err());
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let model = ToyBaseModel::from_seed(4, 2, 7).unwrap();
        assert!(matches!(
            base_forward(&model, &[1.0, 2.0]),
            Err(ExpertError::DimMismatch { expected: 4, got: 2 })
        ));
    }

    #[test]
    fn lora_forward_examples() {
        let layer = Layer::without_bias(Mat::identity(2));
        let module = toy_module();
        assert_eq!(lora_forward(&layer, &module, &[1.0, 1.0]).unwrap(), vec![2.0, 1.0]);

        let mut zero_b = module.clone();
        zero_b.b = Mat::zeros(2, 1);
        assert_eq!(lora_forward(&layer, &zero_b, &[0.3, -4.0]).unwrap(), vec![0.3, -4.0]);

        let mut no_scale = module;
        no_scale.lora_scaling = 0.0;
        assert_eq!(lora_forward(&layer, &no_scale, &[0.3, -4.0]).unwrap(), vec![0.3, -4.0]);
    }

    #[test]
    fn gated_forward_examples() {
        let layer = Layer::without_bias(Mat::identity(2));
        let zero_gate = toy_module().with_gate(vec![0.0, 0.0]).unwrap();
        // σ(0) = 0.5
        assert_eq!(gated_forward(&layer, &zero_gate, &[1.0, 1.0]).unwrap(), vec![1.5, 1.0]);

        let h = 3f64.ln() / 2.0;
        let gated = toy_module().with_gate(vec![h, h]).unwrap();
        let out = gated_forward(&layer, &gated, &[1.0, 1.0]).unwrap();
        assert!((out[0] - 1.75).abs() < 1e-12 && out[1] == 1.0);

        let saturated = toy_module().with_gate(vec![50.0, 50.0]).unwrap();
        let out = gated_forward(&layer, &saturated, &[1.0, 1.0]).unwrap();
        let plain = lora_forward(&layer, &saturated, &[1.0, 1.0]).unwrap();
        assert!(out.iter().zip(&plain).all(|(a, b)| (a - b).abs() < 1e-12));

        assert_eq!(
            gated_forward(&layer, &toy_module(), &[1.0, 1.0]),
            Err(ExpertError::MissingGate)
        );
    }

    #[test]
    fn gate_forced_to_one_matches_lora_bitwise() {
        let base = ToyBaseModel::from_seed(8, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = LoraModule::init(8, 2, 1.0, &mut rng).unwrap();
        m.b = Mat::from_vec(8, 2, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let u: Vec<f64> = (0..8).map(|i| (i as f64).cos()).collect();
        let a = gated_forward_with(base.layer(0), &m, &u, 1.0).unwrap();
        let b = lora_forward(base.layer(0), &m, &u).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lora_forward_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = Layer::without_bias(Mat::from_vec(6, 6, w).unwrap());
        let mut m = LoraModule::init(6, 3, 1.0, &mut rng).unwrap();
        m.b = Mat::from_vec(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -2.3);
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lhs = lora_forward(&layer, &m, &mix).unwrap();
        let fu = lora_forward(&layer, &m, &u).unwrap();
        let fv = lora_forward(&layer, &m, &v).unwrap();
        for i in 0..6 {
            assert!((lhs[i] - (a * fu[i] + b * fv[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_rank_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            LoraModule::init(4, 5, 1.0, &mut rng),
            Err(ExpertError::BadRank { rank: 5, d: 4 })
        ));
        assert!(LoraModule::init(4, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn global_vector_is_normalized() {
        let mut e = ExpertModel::new("x", vec![]);
        e.set_global_vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(e.global_vector, Some(vec![0.6, 0.8]));
        assert!(e.set_global_vector(vec![0.0, 0.0]).is_err());
    }
}
