//! Embedding provider: remote HTTP service or deterministic local mock, with
//! a persistent content-addressed cache and domain-embedding concatenation.

mod cache;
mod mock;
mod remote;

pub use mock::mock_embedding;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::serializer::{
    domain_doc_prompt, serialize_record, DomainInfoDoc, PromptText, SerializationTemplate,
    SerializeError, TaskDescription,
};

pub const EMBED_DIM: usize = 4096;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("embedding cache error for entry {entry}: {message}")]
    Cache { entry: String, message: String },
    #[error("dimension mismatch: expected {want}, got {got}")]
    Dim { want: usize, got: usize },
    #[error("record {index}: {source}")]
    AtRecord {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error(transparent)]
    Serialize(#[from] SerializeError),
}

/// Fixed-width real vector produced by the provider. Values are stored as
/// f32, matching the on-disk format, so cache round-trips are bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Widened copy for the f64 model stack.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_dim() -> usize {
    EMBED_DIM
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

impl ProviderConfig {
    pub fn mock(cache_dir: Option<PathBuf>) -> ProviderConfig {
        ProviderConfig {
            kind: ProviderKind::Mock,
            endpoint: None,
            model_name: "tslab-mock".into(),
            cache_dir,
            dim: EMBED_DIM,
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.kind == ProviderKind::Remote && self.endpoint.is_none() {
            return Err(EmbedError::Provider(
                "remote provider requires an endpoint".into(),
            ));
        }
        if self.model_name.is_empty() {
            return Err(EmbedError::Provider("model_name must be set".into()));
        }
        Ok(())
    }
}

/// Embedding provider with a persistent cache and a call counter (the
/// counter only moves when the underlying provider actually computes).
pub struct EmbeddingProvider {
    cfg: ProviderConfig,
    calls: AtomicU64,
}

impl EmbeddingProvider {
    pub fn new(cfg: ProviderConfig) -> Result<EmbeddingProvider, EmbedError> {
        cfg.validate()?;
        Ok(EmbeddingProvider {
            cfg,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    /// Number of non-cache provider computations since construction.
    pub fn provider_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn cache_key(&self, prompt: &PromptText) -> String {
        let kind = match self.cfg.kind {
            ProviderKind::Remote => "remote",
            ProviderKind::Mock => "mock",
        };
        let material = format!(
            "{kind}\u{1f}{}\u{1f}{}",
            self.cfg.model_name,
            prompt.cache_repr()
        );
        crate::seeding::sha256_hex(material.as_bytes())
    }

    fn compute(&self, prompt: &PromptText) -> Result<EmbeddingVector, EmbedError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let v = match self.cfg.kind {
            ProviderKind::Mock => mock::mock_embedding(prompt, self.cfg.dim),
            ProviderKind::Remote => remote::fetch_embedding(&self.cfg, prompt)?,
        };
        if v.dim() != self.cfg.dim {
            return Err(EmbedError::Dim {
                want: self.cfg.dim,
                got: v.dim(),
            });
        }
        if !v.all_finite() {
            return Err(EmbedError::Provider("non-finite embedding entry".into()));
        }
        Ok(v)
    }

    /// Embed one prompt, consulting the cache first.
    pub fn embed(&self, prompt: &PromptText) -> Result<EmbeddingVector, EmbedError> {
        if prompt.text.trim().is_empty() {
            return Err(EmbedError::EmptyPrompt);
        }
        let key = self.cache_key(prompt);
        if let Some(dir) = &self.cfg.cache_dir {
            if let Some(hit) = cache::read(dir, &key, self.cfg.dim)? {
                return Ok(hit);
            }
        }
        let v = self.compute(prompt)?;
        if let Some(dir) = &self.cfg.cache_dir {
            cache::write(dir, &key, &v)?;
        }
        Ok(v)
    }

    /// Serialize and embed every record of a dataset, in record order.
    pub fn embed_dataset(
        &self,
        dataset: &Dataset,
        template: &SerializationTemplate,
        task: &TaskDescription,
    ) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(dataset.len());
        for (index, record) in dataset.records.iter().enumerate() {
            let prompt = serialize_record(record, &dataset.schema, template, task)
                .map_err(EmbedError::from)?;
            let v = self.embed(&prompt).map_err(|e| EmbedError::AtRecord {
                index,
                source: Box::new(e),
            })?;
            out.push(v);
        }
        Ok(out)
    }

    /// Embed a domain-information document (computed once per domain and
    /// shared by all its records).
    pub fn embed_domain_doc(
        &self,
        doc: &DomainInfoDoc,
        task: &TaskDescription,
    ) -> Result<EmbeddingVector, EmbedError> {
        self.embed(&domain_doc_prompt(doc, task))
    }
}

/// Concatenate a record embedding with a domain-information embedding:
/// `[x ‖ c]`, record first, no renormalization.
pub fn concat_domain(
    x: &EmbeddingVector,
    c: &EmbeddingVector,
) -> Result<EmbeddingVector, EmbedError> {
    if x.dim() != c.dim() {
        return Err(EmbedError::Dim {
            want: x.dim(),
            got: c.dim(),
        });
    }
    let mut values = Vec::with_capacity(x.dim() * 2);
    values.extend_from_slice(&x.values);
    values.extend_from_slice(&c.values);
    Ok(EmbeddingVector { values })
}
