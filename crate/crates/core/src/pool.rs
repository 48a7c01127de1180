//! Aggregator-side expert registry with bit-exact JSON persistence.
//!
//! Numeric arrays are stored as base64 blobs of little-endian IEEE-754
//! doubles next to an explicit shape, so every float survives a round trip
//! bit for bit. Names and descriptions stay plain JSON strings.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expert::{ExpertError, ExpertModel, LoraModule, ToyBaseModel, NONLINEARITY_TANH};
use crate::linalg::Mat;

pub const POOL_FORMAT_VERSION: &str = "glider-pool/1";
pub const CREATED_BY: &str = concat!("glider ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("expert name {0:?} already in pool")]
    DuplicateName(String),
    #[error("expert {name:?}: {what} mismatch (pool {expected}, expert {got})")]
    DimMismatch {
        name: String,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unsupported pool format: {0}")]
    VersionMismatch(String),
    #[error("corrupt pool file at byte {offset}: {reason}")]
    CorruptFile { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Expert(#[from] ExpertError),
}

pub type Result<T> = std::result::Result<T, PoolError>;

/// Shape-tagged base64 float array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub blob: String,
}

impl Blob {
    pub fn from_slice(shape: Vec<usize>, values: &[f64]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape,
            blob: B64.encode(bytes),
        }
    }

    pub fn from_vec(values: &[f64]) -> Self {
        Self::from_slice(vec![values.len()], values)
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self::from_slice(vec![m.rows(), m.cols()], m.data())
    }

    /// Decodes the payload; the error string names the problem.
    pub fn decode(&self) -> std::result::Result<Vec<f64>, String> {
        let bytes = B64
            .decode(&self.blob)
            .map_err(|e| format!("bad base64: {e}"))?;
        if bytes.len() % 8 != 0 {
            return Err(format!("payload length {} is not a multiple of 8", bytes.len()));
        }
        let expected: usize = self.shape.iter().product();
        if bytes.len() / 8 != expected {
            return Err(format!(
                "shape {:?} needs {expected} values, payload has {}",
                self.shape,
                bytes.len() / 8
            ));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn decode_mat(&self) -> std::result::Result<Mat, String> {
        let [rows, cols] = self.shape[..] else {
            return Err(format!("expected a 2-D shape, got {:?}", self.shape));
        };
        Mat::from_vec(rows, cols, self.decode()?).map_err(|e| e.to_string())
    }

    pub fn decode_vec(&self) -> std::result::Result<Vec<f64>, String> {
        if self.shape.len() != 1 {
            return Err(format!("expected a 1-D shape, got {:?}", self.shape));
        }
        self.decode()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    pub d: usize,
    pub m: usize,
    pub seed: u64,
    pub nonlinearity: String,
}

impl BaseSpec {
    pub fn of(base: &ToyBaseModel) -> Self {
        Self {
            d: base.hidden(),
            m: base.num_modules(),
            seed: base.seed(),
            nonlinearity: NONLINEARITY_TANH.to_string(),
        }
    }

    pub fn build(&self) -> std::result::Result<ToyBaseModel, String> {
        if self.nonlinearity != NONLINEARITY_TANH {
            return Err(format!("unsupported nonlinearity {:?}", self.nonlinearity));
        }
        ToyBaseModel::from_seed(self.d, self.m, self.seed).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleRecord {
    pub layer: usize,
    pub rank: usize,
    pub lora_scaling: f64,
    #[serde(rename = "A")]
    pub a: Blob,
    #[serde(rename = "B")]
    pub b: Blob,
    pub gate: Option<Blob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertRecord {
    pub name: String,
    pub task_description: String,
    pub global_vector: Option<Blob>,
    pub modules: Vec<ModuleRecord>,
}

impl ExpertRecord {
    pub fn from_expert(e: &ExpertModel) -> Self {
        Self {
            name: e.name.clone(),
            task_description: e.task_description.clone(),
            global_vector: e.global_vector.as_deref().map(Blob::from_vec),
            modules: e
                .modules
                .iter()
                .enumerate()
                .map(|(layer, m)| ModuleRecord {
                    layer,
                    rank: m.rank(),
                    lora_scaling: m.lora_scaling,
                    a: Blob::from_mat(&m.a),
                    b: Blob::from_mat(&m.b),
                    gate: m.gate.as_deref().map(Blob::from_vec),
                })
                .collect(),
        }
    }

    /// Rebuilds the expert; the error string names the offending field.
    pub fn to_expert(&self) -> std::result::Result<ExpertModel, (String, String)> {
        let field = |f: &str| format!("{}.{f}", self.name);
        let mut modules = Vec::with_capacity(self.modules.len());
        for (i, rec) in self.modules.iter().enumerate() {
            if rec.layer != i {
                return Err((field("modules"), format!("layer {} out of order", rec.layer)));
            }
            let a = rec.a.decode_mat().map_err(|e| (quoted(&rec.a.blob), e))?;
            let b = rec.b.decode_mat().map_err(|e| (quoted(&rec.b.blob), e))?;
            if a.rows() != rec.rank {
                return Err((field("rank"), format!("rank {} but A has {} rows", rec.rank, a.rows())));
            }
            let mut module = LoraModule::new(a, b, rec.lora_scaling)
                .map_err(|e| (field("modules"), e.to_string()))?;
            if let Some(g) = &rec.gate {
                let v = g.decode_vec().map_err(|e| (quoted(&g.blob), e))?;
                module = module
                    .with_gate(v)
                    .map_err(|e| (quoted(&g.blob), e.to_string()))?;
            }
            modules.push(module);
        }
        let mut expert = ExpertModel::new(self.name.clone(), modules);
        expert.task_description = self.task_description.clone();
        if let Some(g) = &self.global_vector {
            // stored vectors are already unit norm; keep their exact bits
            expert.global_vector = Some(g.decode_vec().map_err(|e| (quoted(&g.blob), e))?);
        }
        Ok(expert)
    }
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolFile {
    version: String,
    base: BaseSpec,
    d_g: usize,
    created_by: String,
    experts: Vec<ExpertRecord>,
}

/// Ordered collection of experts over one shared base model.
#[derive(Debug, Clone)]
pub struct ExpertPool {
    base_spec: BaseSpec,
    base: ToyBaseModel,
    d_g: usize,
    created_by: String,
    experts: Vec<ExpertModel>,
    revision: u64,
}

/// Equality ignores the revision counter, which is session state.
impl PartialEq for ExpertPool {
    fn eq(&self, other: &Self) -> bool {
        self.base_spec == other.base_spec
            && self.base == other.base
            && self.d_g == other.d_g
            && self.created_by == other.created_by
            && self.experts == other.experts
    }
}

impl ExpertPool {
    /// Empty pool over a seeded base model.
    pub fn new(base: ToyBaseModel, d_g: usize) -> Self {
        Self {
            base_spec: BaseSpec::of(&base),
            base,
            d_g,
            created_by: CREATED_BY.to_string(),
            experts: Vec::new(),
            revision: 0,
        }
    }

    pub fn base(&self) -> &ToyBaseModel {
        &self.base
    }

    pub fn base_spec(&self) -> &BaseSpec {
        &self.base_spec
    }

    pub fn d_g(&self) -> usize {
        self.d_g
    }

    pub fn created_by(&self) -> &str {
        &self.created_by
    }

    pub fn experts(&self) -> &[ExpertModel] {
        &self.experts
    }

    pub fn expert(&self, i: usize) -> &ExpertModel {
        &self.experts[i]
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.experts.iter().position(|e| e.name == name)
    }

    /// Bumped on every mutation; routers built at an older revision are
    /// stale.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Appends an expert and returns its index.
    pub fn add_expert(&mut self, expert: ExpertModel) -> Result<usize> {
        if self.index_of(&expert.name).is_some() {
            return Err(PoolError::DuplicateName(expert.name));
        }
        let mismatch = |what, expected, got| PoolError::DimMismatch {
            name: expert.name.clone(),
            what,
            expected,
            got,
        };
        if expert.modules.len() != self.base.num_modules() {
            return Err(mismatch("module count", self.base.num_modules(), expert.modules.len()));
        }
        for m in &expert.modules {
            if m.hidden() != self.base.hidden() {
                return Err(mismatch("hidden width", self.base.hidden(), m.hidden()));
            }
        }
        if let Some(g) = &expert.global_vector {
            if g.len() != self.d_g {
                return Err(mismatch("global vector width", self.d_g, g.len()));
            }
        }
        self.experts.push(expert);
        self.revision += 1;
        Ok(self.experts.len() - 1)
    }

    /// Replaces the global routing data of an existing expert.
    pub fn set_global(&mut self, index: usize, g: Vec<f64>, description: String) -> Result<()> {
        let name = self.experts[index].name.clone();
        if g.len() != self.d_g {
            return Err(PoolError::DimMismatch {
                name,
                what: "global vector width",
                expected: self.d_g,
                got: g.len(),
            });
        }
        let e = &mut self.experts[index];
        e.set_global_vector(g)?;
        e.task_description = description;
        self.revision += 1;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = PoolFile {
            version: POOL_FORMAT_VERSION.to_string(),
            base: self.base_spec.clone(),
            d_g: self.d_g,
            created_by: self.created_by.clone(),
            experts: self.experts.iter().map(ExpertRecord::from_expert).collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("pool serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| corrupt(text, &e))?;
        match value.get("version").and_then(|v| v.as_str()) {
            Some(POOL_FORMAT_VERSION) => {}
            Some(other) => {
                return Err(PoolError::VersionMismatch(format!(
                    "version {other:?}, expected {POOL_FORMAT_VERSION:?}"
                )))
            }
            None => {
                return Err(PoolError::CorruptFile {
                    offset: 0,
                    reason: "missing version field".into(),
                })
            }
        }
        let file: PoolFile = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("unknown field") {
                PoolError::VersionMismatch(format!("{msg} (not part of {POOL_FORMAT_VERSION})"))
            } else {
                corrupt(text, &e)
            }
        })?;
        let base = file.base.build().map_err(|reason| PoolError::CorruptFile {
            offset: offset_of(text, "\"base\""),
            reason,
        })?;
        let mut pool = ExpertPool {
            base_spec: file.base,
            base,
            d_g: file.d_g,
            created_by: file.created_by,
            experts: Vec::new(),
            revision: 0,
        };
        for rec in &file.experts {
            let anchor = quoted(&rec.name);
            let expert = rec.to_expert().map_err(|(needle, reason)| PoolError::CorruptFile {
                offset: offset_after(text, &anchor, &needle),
                reason,
            })?;
            pool.add_expert(expert)?;
        }
        pool.revision = 0;
        Ok(pool)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// SHA-256 (hex) over the base spec, every name and description, and
    /// every numeric payload's bit pattern, in pool order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(POOL_FORMAT_VERSION.as_bytes());
        h.update((self.base_spec.d as u64).to_le_bytes());
        h.update((self.base_spec.m as u64).to_le_bytes());
        h.update(self.base_spec.seed.to_le_bytes());
        h.update((self.d_g as u64).to_le_bytes());
        let feed = |h: &mut Sha256, xs: &[f64]| {
            h.update((xs.len() as u64).to_le_bytes());
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        for e in &self.experts {
            h.update(e.name.as_bytes());
            h.update([0]);
            h.update(e.task_description.as_bytes());
            h.update([0]);
            feed(&mut h, e.global_vector.as_deref().unwrap_or(&[]));
            for m in &e.modules {
                h.update(m.lora_scaling.to_le_bytes());
                feed(&mut h, m.a.data());
                feed(&mut h, m.b.data());
                feed(&mut h, m.gate.as_deref().unwrap_or(&[]));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn corrupt(text: &str, e: &serde_json::Error) -> PoolError {
    PoolError::CorruptFile {
        offset: line_col_to_offset(text, e.line(), e.column()),
        reason: e.to_string(),
    }
}

/// serde_json reports 1-based line and column.
fn line_col_to_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn offset_of(text: &str, needle: &str) -> usize {
    text.find(needle).unwrap_or(0)
}

/// First occurrence of `needle` after the first occurrence of `anchor`.
fn offset_after(text: &str, anchor: &str, needle: &str) -> usize {
    let start = text.find(anchor).unwrap_or(0);
    text[start..].find(needle).map_or(start, |i| start + i)
}
