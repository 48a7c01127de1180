//! Global routing vectors: an LLM writes a one-sentence task description
//! from three input/output examples, and an embedding model turns that
//! description into a unit vector.
//!
//! Two backends are provided for each role: an HTTP client speaking the
//! chat-completions / embeddings JSON conventions, and a deterministic
//! offline mock.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_API_KEY: &str = "GLIDER_LLM_API_KEY";
pub const ENV_LLM_BASE_URL: &str = "GLIDER_LLM_BASE_URL";
pub const ENV_EMBED_BASE_URL: &str = "GLIDER_EMBED_BASE_URL";
pub const ENV_LLM_MODEL: &str = "GLIDER_LLM_MODEL";
pub const ENV_EMBED_MODEL: &str = "GLIDER_EMBED_MODEL";

/// Embedding width of the mock embedder.
pub const DEFAULT_MOCK_DIM: usize = 64;
pub const MIN_EMBED_DIM: usize = 8;

/// Number of in-context examples in every description prompt.
pub const EXAMPLES_PER_PROMPT: usize = 3;

/// Instruction block of the description prompt.
pub const PROMPT_INSTRUCTION: &str = "The following are three pairs of input-output examples \
from one task. Generate the task instruction in one sentence that is most possibly used to \
command a language model to produce them. In the instruction, remember to point out the skill \
or knowledge required for the task to guide the language model.";

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("expected exactly {EXAMPLES_PER_PROMPT} examples, got {0}")]
    BadExampleCount(usize),
    #[error("LLM unavailable after {attempts} attempts: {last}")]
    LlmUnavailable { attempts: usize, last: String },
    #[error("LLM returned an empty completion")]
    EmptyCompletion,
    #[error("embedding service unavailable after {attempts} attempts: {last}")]
    EmbedUnavailable { attempts: usize, last: String },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("embedding dimension {0} is below the minimum of {MIN_EMBED_DIM}")]
    BadDimension(usize),
    #[error("missing configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SemanticError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// Describing an expert's training task.
    Expert,
    /// Describing an incoming query.
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionRequest {
    examples: Vec<(String, String)>,
    pub origin: Origin,
}

impl InstructionRequest {
    pub fn new(examples: Vec<(String, String)>, origin: Origin) -> Result<Self> {
        if examples.len() != EXAMPLES_PER_PROMPT {
            return Err(SemanticError::BadExampleCount(examples.len()));
        }
        Ok(Self { examples, origin })
    }

    pub fn examples(&self) -> &[(String, String)] {
        &self.examples
    }
}

/// Renders the description prompt. Byte-stable for identical requests.
pub fn build_prompt(req: &InstructionRequest) -> String {
    let mut out = String::from(PROMPT_INSTRUCTION);
    for (input, output) in &req.examples {
        out.push_str("\n\n- Input: ");
        out.push_str(input);
        out.push_str("\n- Output: ");
        out.push_str(output);
    }
    out
}

/// Text completion backend.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Text embedding backend.
pub trait Embedder: Send + Sync {
    /// Raw embedding; [`embed`] normalizes it.
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>>;
}

/// Asks the LLM for a description and collapses it to one trimmed line.
pub fn generate_description(req: &InstructionRequest, client: &dyn LlmClient) -> Result<String> {
    let completion = client.complete(&build_prompt(req))?;
    let line = completion.split_whitespace().collect::<Vec<_>>().join(" ");
    let line = line.trim_matches(|c| c == '"' || c == '\'').trim().to_string();
    if line.is_empty() {
        return Err(SemanticError::EmptyCompletion);
    }
    Ok(line)
}

/// Unit-norm embedding of non-empty text.
pub fn embed(text: &str, embedder: &dyn Embedder) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Err(SemanticError::EmptyText);
    }
    let raw = embedder.embed_raw(text)?;
    if raw.len() < MIN_EMBED_DIM {
        return Err(SemanticError::BadDimension(raw.len()));
    }
    let n = crate::linalg::norm(&raw);
    if !(n > crate::linalg::EPS) || !n.is_finite() {
        return Err(SemanticError::BadResponse("zero or non-finite embedding".into()));
    }
    Ok(raw.into_iter().map(|v| v / n).collect())
}

/// Description then embedding. Returns `(g, description)`.
pub fn make_global_vector(
    examples: Vec<(String, String)>,
    origin: Origin,
    client: &dyn LlmClient,
    embedder: &dyn Embedder,
) -> Result<(Vec<f64>, String)> {
    let req = InstructionRequest::new(examples, origin)?;
    let description = generate_description(&req, client)?;
    let g = embed(&description, embedder)?;
    Ok((g, description))
}

/// Offline LLM that answers every prompt with a fixed sentence.
#[derive(Debug)]
pub struct MockLlm {
    response: String,
    calls: AtomicUsize,
}

impl MockLlm {
    pub fn canned(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl LlmClient for MockLlm {
    fn complete(&self, _prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.response.clone())
    }
}

/// Offline embedder: SHA-256 of `(seed, text)` seeds a generator that draws
/// `dim` standard normals.
#[derive(Debug)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
    calls: AtomicUsize,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < MIN_EMBED_DIM {
            return Err(SemanticError::BadDimension(dim));
        }
        Ok(Self {
            dim,
            seed,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn text_seed(&self, text: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(word)
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_MOCK_DIM, 0).expect("default dim is valid")
    }
}

impl Embedder for MockEmbedder {
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.text_seed(text));
        Ok((0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect())
    }
}

/// Which embedder to build.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedderSpec {
    Mock { dim: usize, seed: u64 },
    Remote(RemoteConfig),
}

impl EmbedderSpec {
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            EmbedderSpec::Mock { dim, seed } => Box::new(MockEmbedder::new(*dim, *seed)?),
            EmbedderSpec::Remote(cfg) => Box::new(RemoteEmbedder::new(cfg.clone())),
        })
    }
}

/// Timeouts and retries for remote calls.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            initial_backoff: Duration::from_secs(1),
            timeout: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn attempts(&self) -> usize {
        self.max_retries + 1
    }

    /// Runs `op` until it succeeds or attempts run out, doubling the backoff
    /// between tries. Returns the attempt count with the last error.
    fn run<T, F>(&self, mut op: F) -> std::result::Result<T, (usize, String)>
    where
        F: FnMut() -> std::result::Result<T, Attempt>,
    {
        let mut backoff = self.initial_backoff;
        let mut last = String::new();
        for attempt in 0..self.attempts() {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match op() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err((attempt + 1, e)),
                Err(Attempt::Retry(e)) => last = e,
            }
        }
        Err((self.attempts(), last))
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

/// Endpoint configuration for remote calls.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Base URL, e.g. `https://host/v1`; `/chat/completions` or
    /// `/embeddings` is appended.
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    fn from_env_vars(url_var: &str, model_var: &str) -> Result<Self> {
        let base_url =
            std::env::var(url_var).map_err(|_| SemanticError::Config(format!("{url_var} is not set")))?;
        let model = std::env::var(model_var)
            .map_err(|_| SemanticError::Config(format!("{model_var} is not set")))?;
        Ok(Self {
            base_url,
            model,
            api_key: std::env::var(ENV_API_KEY).ok(),
            retry: RetryPolicy::default(),
        })
    }

    /// Chat endpoint from `GLIDER_LLM_BASE_URL`, `GLIDER_LLM_MODEL` and
    /// `GLIDER_LLM_API_KEY`.
    pub fn llm_from_env() -> Result<Self> {
        Self::from_env_vars(ENV_LLM_BASE_URL, ENV_LLM_MODEL)
    }

    /// Embedding endpoint from `GLIDER_EMBED_BASE_URL`, `GLIDER_EMBED_MODEL`
    /// and `GLIDER_LLM_API_KEY`.
    pub fn embed_from_env() -> Result<Self> {
        Self::from_env_vars(ENV_EMBED_BASE_URL, ENV_EMBED_MODEL)
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.retry.timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }

    fn post_json(&self, agent: &ureq::Agent, path: &str, body: &str) -> std::result::Result<String, Attempt> {
        let mut req = agent
            .post(self.endpoint(path))
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct EmbeddingRequest {
    pub model: String,
    pub input: String,
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

/// Extracts the first choice's message text from a chat-completions body.
pub fn parse_chat_response(body: &str) -> Result<String> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| SemanticError::BadResponse(e.to_string()))?;
    let content = resp
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .unwrap_or_default();
    if content.trim().is_empty() {
        return Err(SemanticError::EmptyCompletion);
    }
    Ok(content)
}

/// Extracts the first embedding from an embeddings body.
pub fn parse_embedding_response(body: &str) -> Result<Vec<f64>> {
    let resp: EmbeddingResponse =
        serde_json::from_str(body).map_err(|e| SemanticError::BadResponse(e.to_string()))?;
    resp.data
        .into_iter()
        .next()
        .map(|d| d.embedding)
        .ok_or_else(|| SemanticError::BadResponse("no embedding in response".into()))
}

/// Chat-completions client with bearer auth, timeouts and retries.
pub struct RemoteLlm {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteLlm {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = cfg.agent();
        Self { cfg, agent }
    }
}

impl LlmClient for RemoteLlm {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::to_string(&ChatRequest {
            model: self.cfg.model.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature: 0.0,
        })
        .map_err(|e| SemanticError::BadResponse(e.to_string()))?;
        let text = self
            .cfg
            .retry
            .run(|| self.cfg.post_json(&self.agent, "chat/completions", &body))
            .map_err(|(attempts, last)| SemanticError::LlmUnavailable { attempts, last })?;
        parse_chat_response(&text)
    }
}

/// Embeddings client with bearer auth, timeouts and retries.
pub struct RemoteEmbedder {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = cfg.agent();
        Self { cfg, agent }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>> {
        let body = serde_json::to_string(&EmbeddingRequest {
            model: self.cfg.model.clone(),
            input: text.to_string(),
        })
        .map_err(|e| SemanticError::BadResponse(e.to_string()))?;
        let resp = self
            .cfg
            .retry
            .run(|| self.cfg.post_json(&self.agent, "embeddings", &body))
            .map_err(|(attempts, last)| SemanticError::EmbedUnavailable { attempts, last })?;
        parse_embedding_response(&resp)
    }
}
