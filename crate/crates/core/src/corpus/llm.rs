//! Completion client for description generation: pluggable transport, prompt
//! cache keyed by content hash, and a validation gate on real output.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mock::mock_llm_generate;
use super::parse::parse_llm_response;
use super::{CorpusError, StepDescriptionSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub cache_dir: Option<PathBuf>,
    /// Decoding parameters are passed through verbatim when set.
    pub temperature: Option<f64>,
    pub max_tokens: Option<u64>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: String::new(),
            model: String::new(),
            timeout_secs: 60,
            max_retries: 2,
            cache_dir: None,
            temperature: None,
            max_tokens: None,
            api_key_env: None,
        }
    }
}

/// One prompt-completion exchange, whatever produces it.
pub trait CompletionBackend {
    fn complete(&self, prompt: &str, config: &LlmClientConfig) -> Result<String, CorpusError>;
    /// Real backends get a hard validation gate; offline ones only a report.
    fn is_authoritative(&self) -> bool {
        false
    }
}

/// Offline backend: answers every prompt through the deterministic mock.
/// The verb is taken to be the first token of the step.
pub struct MockBackend {
    pub k: usize,
    pub seed: u64,
}

impl MockBackend {
    /// The prompt ends with the query block; recover (task, step) from it.
    fn query_of(prompt: &str) -> (String, String) {
        let mut task = String::new();
        let mut step = String::new();
        for line in prompt.lines() {
            if let Some(rest) = line.strip_prefix("[goal]: ") {
                task = rest.trim().to_string();
            } else if let Some(rest) = line.strip_prefix("[step]: ") {
                step = rest.trim().to_string();
            }
        }
        (task, step)
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, prompt: &str, _config: &LlmClientConfig) -> Result<String, CorpusError> {
        let (task, step) = Self::query_of(prompt);
        let verb = step.split_whitespace().next().unwrap_or("do").to_string();
        Ok(mock_llm_generate(&task, &step, &verb, self.k, self.seed))
    }
}

/// Chat-completion-style HTTP backend (OpenAI-compatible request shape).
#[cfg(feature = "llm-http")]
pub struct HttpBackend;

#[cfg(feature = "llm-http")]
impl CompletionBackend for HttpBackend {
    fn complete(&self, prompt: &str, config: &LlmClientConfig) -> Result<String, CorpusError> {
        let mut body = serde_json::json!({
            "model": config.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(t) = config.temperature {
            body["temperature"] = serde_json::json!(t);
        }
        if let Some(m) = config.max_tokens {
            body["max_tokens"] = serde_json::json!(m);
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let mut req = agent.post(&config.endpoint);
        if let Some(env) = &config.api_key_env {
            if let Ok(key) = std::env::var(env) {
                req = req.header("authorization", &format!("Bearer {key}"));
            }
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| CorpusError::Endpoint(e.to_string()))?;
        let parsed: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| CorpusError::Endpoint(e.to_string()))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                CorpusError::Endpoint("response missing choices[0].message.content".into())
            })
    }

    fn is_authoritative(&self) -> bool {
        true
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    prompt: String,
    model: String,
    temperature: Option<f64>,
    max_tokens: Option<u64>,
    response: String,
}

/// Cached, retried, validated description fetching over any backend.
pub struct LlmClient<B: CompletionBackend> {
    pub config: LlmClientConfig,
    backend: B,
}

impl<B: CompletionBackend> LlmClient<B> {
    pub fn new(config: LlmClientConfig, backend: B) -> Self {
        LlmClient { config, backend }
    }

    fn cache_key(&self, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(prompt.as_bytes());
        h.update([0x1f]);
        h.update(self.config.model.as_bytes());
        h.update(format!("{:?}|{:?}", self.config.temperature, self.config.max_tokens).as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn cache_path(&self, prompt: &str) -> Option<PathBuf> {
        self.config
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", self.cache_key(prompt))))
    }

    /// Raw completion text for a prompt, from cache when available.
    pub fn complete(&self, prompt: &str) -> Result<String, CorpusError> {
        if let Some(path) = self.cache_path(prompt) {
            if let Ok(text) = fs::read_to_string(&path) {
                if let Ok(entry) = serde_json::from_str::<CacheEntry>(&text) {
                    return Ok(entry.response);
                }
            }
        }
        let mut last_err = None;
        for _ in 0..=self.config.max_retries {
            match self.backend.complete(prompt, &self.config) {
                Ok(resp) => {
                    self.write_cache(prompt, &resp)?;
                    return Ok(resp);
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| CorpusError::Endpoint("no attempts made".into())))
    }

    /// Atomic per-prompt cache write: temp file in the same directory, then
    /// rename.
    fn write_cache(&self, prompt: &str, response: &str) -> Result<(), CorpusError> {
        let Some(path) = self.cache_path(prompt) else {
            return Ok(());
        };
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir)?;
        let entry = CacheEntry {
            prompt: prompt.to_string(),
            model: self.config.model.clone(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            response: response.to_string(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(serde_json::to_string_pretty(&entry)?.as_bytes())?;
        tmp.persist(&path).map_err(|e| CorpusError::Io(e.error))?;
        Ok(())
    }

    /// Completes, parses, and validates one step's descriptions. Validation
    /// failures are hard errors for authoritative (network) backends and are
    /// returned as `soft_report` otherwise.
    pub fn describe(
        &self,
        task: &str,
        step: &str,
        prompt: &str,
        k: usize,
    ) -> Result<(StepDescriptionSet, Vec<String>), CorpusError> {
        let raw = self.complete(prompt)?;
        let set = parse_llm_response(&raw, k)?.into_set(task, step);
        let violations = set.violations(k);
        if !violations.is_empty() && self.backend.is_authoritative() {
            return Err(CorpusError::Validation(violations));
        }
        Ok((set, violations))
    }
}
