//! JSON configuration, topology validation and client assembly.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use privq::datasetpipe::DatasetConfig;
use privq::game::{GameConfig, GameEndpoints, HandshakeConfig};
use privq::llm_client::{
    Backend, EndpointKind, EndpointRole, EndpointSpec, HttpBackend, LlmClient, MockBackend,
    MockBehavior, RetryPolicy, Trust,
};
use privq::textmetrics::{SimBackend, SimMode};
use privq::types::DecodingParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimChoice {
    pub mode: SimMode,
    /// Id of an endpoint in `endpoints`; required for embedding mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_endpoint: Option<String>,
}

impl Default for SimChoice {
    fn default() -> Self {
        Self { mode: SimMode::RougeLF1, embedding_endpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub run_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { run_dir: PathBuf::from("runs"), cache_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Candidates per pool (true segment plus decoys).
    pub pool_size: usize,
    pub k_list: Vec<usize>,
    pub max_tokens: u32,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { pool_size: 10, k_list: vec![1, 3], max_tokens: 128 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub endpoints: Vec<EndpointSpec>,
    #[serde(default)]
    pub game: GameConfig,
    #[serde(default)]
    pub sim: SimChoice,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub handshake: HandshakeConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub dataset: DatasetConfig,
    /// Names of environment variables holding extra strings that must never
    /// reach an untrusted endpoint.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub secrets_env: Vec<String>,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// All-mock topology used by `--mock` when no config file is given.
    pub fn builtin_mock() -> Self {
        let chat = |id: &str, trust, roles: &[EndpointRole]| EndpointSpec::chat(id, trust, id).with_roles(roles);
        Self {
            endpoints: vec![
                chat("generator", Trust::Trusted, &[EndpointRole::Generator]),
                chat("external", Trust::Untrusted, &[EndpointRole::External]),
                chat("integrator", Trust::Trusted, &[EndpointRole::Integrator]),
                chat("attacker", Trust::Trusted, &[EndpointRole::Attacker]),
                chat("judge", Trust::Trusted, &[EndpointRole::Judge]),
                chat("qa-writer", Trust::Trusted, &[EndpointRole::QaGenerator]),
                EndpointSpec::embedding("embedder", Trust::Trusted, "embedder").with_roles(&[EndpointRole::Embedding]),
            ],
            game: GameConfig { t: 2, batch_size: 8, ..GameConfig::default() },
            sim: SimChoice { mode: SimMode::EmbeddingCosine, embedding_endpoint: Some("embedder".into()) },
            decoding: DecodingParams::default(),
            paths: Paths::default(),
            seed: 0,
            retry: RetryPolicy::default(),
            handshake: HandshakeConfig::default(),
            eval: EvalSettings::default(),
            dataset: DatasetConfig::default(),
            secrets_env: Vec::new(),
        }
    }

    /// Mock runs have no trainer to acknowledge rounds, so they do it themselves.
    pub fn force_mock(&mut self) {
        self.handshake.auto_ack = true;
        self.handshake.verify_health = false;
        self.handshake.poll_interval_ms = self.handshake.poll_interval_ms.min(10);
    }

    /// Hex sha256 of the resolved configuration.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn endpoints_with(&self, role: EndpointRole) -> Vec<&EndpointSpec> {
        self.endpoints.iter().filter(|e| e.has_role(role)).collect()
    }

    pub fn endpoint_for(&self, role: EndpointRole) -> Result<&EndpointSpec> {
        match self.endpoints_with(role).as_slice() {
            [one] => Ok(one),
            [] => bail!("no endpoint has role {}", role_name(role)),
            many => bail!(
                "role {} is assigned to {} endpoints ({}); exactly one is allowed",
                role_name(role),
                many.len(),
                many.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(", ")
            ),
        }
    }

    pub fn game_endpoints(&self) -> Result<GameEndpoints> {
        Ok(GameEndpoints {
            generator: self.endpoint_for(EndpointRole::Generator)?.clone(),
            external: self.endpoint_for(EndpointRole::External)?.clone(),
            integrator: self.endpoint_for(EndpointRole::Integrator)?.clone(),
            attacker: self.endpoint_for(EndpointRole::Attacker)?.clone(),
        })
    }

    pub fn sim_backend(&self) -> Result<SimBackend> {
        match self.sim.mode {
            SimMode::RougeLF1 => Ok(SimBackend::rouge_l()),
            SimMode::EmbeddingCosine => {
                let id = self
                    .sim
                    .embedding_endpoint
                    .as_deref()
                    .ok_or_else(|| anyhow!("sim.mode embedding_cosine needs sim.embedding_endpoint"))?;
                let spec = self
                    .endpoints
                    .iter()
                    .find(|e| e.id == id)
                    .ok_or_else(|| anyhow!("sim.embedding_endpoint {id} is not a configured endpoint"))?;
                if spec.kind != EndpointKind::Embedding {
                    bail!("sim.embedding_endpoint {id} must have kind embedding");
                }
                // Leakage embeds the original query.
                if !spec.is_trusted() {
                    bail!("sim.embedding_endpoint {id} must be trusted: it receives the original query");
                }
                Ok(SimBackend::embedding(spec.clone()))
            }
        }
    }

    /// Checks everything that can be checked without making a call.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for e in &self.endpoints {
            if !ids.insert(e.id.as_str()) {
                bail!("duplicate endpoint id {}", e.id);
            }
        }
        let g = self.game_endpoints()?;
        if !g.generator.is_trusted() {
            bail!("generator endpoint {} must be trusted: it receives the original query", g.generator.id);
        }
        if !g.integrator.is_trusted() {
            bail!("integrator endpoint {} must be trusted: it receives the original query", g.integrator.id);
        }
        if g.external.is_trusted() {
            bail!("external endpoint {} must be tagged untrusted", g.external.id);
        }
        for e in [&g.generator, &g.external, &g.integrator, &g.attacker] {
            if e.kind != EndpointKind::Chat {
                bail!("endpoint {} serves a chat role but has kind embedding", e.id);
            }
        }
        self.sim_backend()?;
        self.game.validate().map_err(|e| anyhow!("game: {e}"))?;
        if !self.decoding.is_valid() {
            bail!("decoding: temperature >= 0, top_p in (0, 1] and max_tokens >= 1 are required");
        }
        if self.retry.max_attempts == 0 {
            bail!("retry.max_attempts must be >= 1");
        }
        if self.eval.pool_size < 2 {
            bail!("eval.pool_size must be >= 2");
        }
        if let Some(&k) = self.eval.k_list.iter().find(|&&k| k == 0 || k > self.eval.pool_size) {
            bail!("eval.k_list entry {k} outside 1..={}", self.eval.pool_size);
        }
        Ok(())
    }

    pub fn secrets(&self) -> Result<Vec<String>> {
        self.secrets_env
            .iter()
            .map(|name| std::env::var(name).with_context(|| format!("secret environment variable {name} is not set")))
            .collect()
    }

    /// Builds the shared client. Under `mock` every endpoint gets an
    /// in-process backend chosen by its roles.
    pub fn client(&self, mock: bool) -> Result<LlmClient> {
        let http: Arc<dyn Backend> = Arc::new(HttpBackend::default());
        let mut builder = LlmClient::builder().retry(self.retry);
        for spec in &self.endpoints {
            let backend: Arc<dyn Backend> = if mock { Arc::new(MockBackend::new(mock_behavior(spec))) } else { http.clone() };
            builder = builder.endpoint(spec.clone(), backend);
        }
        if let Some(dir) = &self.paths.cache_dir {
            builder = builder.cache_dir(dir);
        }
        for s in self.secrets()? {
            builder = builder.secret(s);
        }
        Ok(builder.build()?)
    }
}

fn mock_behavior(spec: &EndpointSpec) -> MockBehavior {
    if spec.has_role(EndpointRole::Generator) {
        MockBehavior::Decomposer
    } else if spec.has_role(EndpointRole::Judge) {
        MockBehavior::Judge
    } else if spec.has_role(EndpointRole::QaGenerator) {
        MockBehavior::QaWriter
    } else {
        MockBehavior::Echo
    }
}

fn role_name(role: EndpointRole) -> String {
    serde_json::to_value(role).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}
