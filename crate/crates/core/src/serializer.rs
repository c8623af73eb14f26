//! Turn records into the instruct/query prompts consumed by the embedding
//! provider: `Instruct: {task}\nQuery: {one sentence per present feature}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{FeatureValue, Record, Schema};

#[derive(Debug, Error)]
pub enum SerializeError {
    #[error("task description must be a nonempty single line")]
    BadTask,
    #[error("override pattern for {feature:?} lacks a {{value}} placeholder")]
    BadOverride { feature: String },
    #[error("in-context samples span domains {first:?} and {second:?}")]
    MixedDomains { first: String, second: String },
    #[error("in-context block needs at least one sample")]
    EmptyBlock,
    #[error("record arity {got} does not match schema arity {want}")]
    ArityMismatch { got: usize, want: usize },
    #[error("config file error: {0}")]
    Config(String),
}

/// One-sentence statement of the classification task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDescription {
    pub text: String,
}

impl TaskDescription {
    pub fn new(text: &str) -> Result<TaskDescription, SerializeError> {
        if text.trim().is_empty() || text.contains('\n') {
            return Err(SerializeError::BadTask);
        }
        Ok(TaskDescription {
            text: text.to_string(),
        })
    }
}

/// Sentence templates: a default "The {feature} is {value}." pattern plus
/// per-feature overrides for verb-style phrasing, shipped as config so new
/// datasets need no code change.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SerializationTemplate {
    pub default_pattern: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
    #[serde(default)]
    pub include_domain_name: bool,
}

impl Default for SerializationTemplate {
    fn default() -> Self {
        SerializationTemplate {
            default_pattern: "The {feature} is {value}.".to_string(),
            overrides: BTreeMap::new(),
            include_domain_name: false,
        }
    }
}

impl SerializationTemplate {
    pub fn validate(&self) -> Result<(), SerializeError> {
        for (feature, pattern) in &self.overrides {
            if !pattern.contains("{value}") {
                return Err(SerializeError::BadOverride {
                    feature: feature.clone(),
                });
            }
        }
        Ok(())
    }

    fn sentence(&self, feature: &str, value: &str) -> String {
        let pattern = self
            .overrides
            .get(feature)
            .map(String::as_str)
            .unwrap_or(self.default_pattern.as_str());
        pattern.replace("{feature}", feature).replace("{value}", value)
    }
}

/// Where a domain-information document came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainInfoSource {
    Wiki,
    Generated,
    TargetSamples,
}

/// Domain-level context text embedded once per domain and concatenated to
/// every record embedding of that domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainInfoDoc {
    pub domain_id: String,
    pub source_kind: DomainInfoSource,
    pub text: String,
}

/// Serialized prompt plus the synthetic-generator side channel that the mock
/// provider folds into its confounder-proxy channel. The proxy participates
/// in cache keys, so two prompts that agree in text but not in proxy never
/// collide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_proxy: Option<f64>,
}

impl PromptText {
    /// The body after `Query: ` (what the mock provider tokenizes).
    pub fn query_body(&self) -> &str {
        match self.text.split_once("\nQuery: ") {
            Some((_, body)) => body,
            None => &self.text,
        }
    }

    /// Stable byte representation for cache keys.
    pub fn cache_repr(&self) -> String {
        match self.synthetic_proxy {
            Some(p) => format!("{}\u{1f}proxy={p:.6}", self.text),
            None => self.text.clone(),
        }
    }
}

/// Render one numeric value without thousands separators or trailing zeros.
pub fn render_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

fn render_value(schema: &Schema, feature_idx: usize, value: &FeatureValue) -> String {
    match value {
        FeatureValue::Number(x) => render_number(*x),
        FeatureValue::Code(code) => schema.features[feature_idx]
            .value_labels
            .as_ref()
            .and_then(|m| m.get(code))
            .cloned()
            .unwrap_or_else(|| code.clone()),
    }
}

fn record_body(
    record: &Record,
    schema: &Schema,
    template: &SerializationTemplate,
    with_domain_name: bool,
) -> Result<String, SerializeError> {
    if record.values.len() != schema.arity() {
        return Err(SerializeError::ArityMismatch {
            got: record.values.len(),
            want: schema.arity(),
        });
    }
    let mut sentences = Vec::new();
    for (j, value) in record.values.iter().enumerate() {
        if let Some(v) = value {
            let rendered = render_value(schema, j, v);
            sentences.push(template.sentence(&schema.features[j].name, &rendered));
        }
    }
    if with_domain_name {
        sentences.push(format!("The person lives in {}.", record.domain_id));
    }
    Ok(sentences.join(" "))
}

/// Serialize one record into an instruct/query prompt. Absent features
/// produce no sentence; feature order follows the schema.
pub fn serialize_record(
    record: &Record,
    schema: &Schema,
    template: &SerializationTemplate,
    task: &TaskDescription,
) -> Result<PromptText, SerializeError> {
    template.validate()?;
    let body = record_body(record, schema, template, template.include_domain_name)?;
    Ok(PromptText {
        text: format!("Instruct: {}\nQuery: {}", task.text, body),
        synthetic_proxy: record.confounder_proxy,
    })
}

/// Serialize labeled samples into an in-context domain-information block:
/// per sample its description (without the domain-name sentence) and an
/// `Answer: Yes.`/`Answer: No.` line, blank-line separated.
pub fn serialize_incontext_block(
    samples: &[Record],
    schema: &Schema,
    template: &SerializationTemplate,
) -> Result<DomainInfoDoc, SerializeError> {
    template.validate()?;
    let first = samples.first().ok_or(SerializeError::EmptyBlock)?;
    for s in samples {
        if s.domain_id != first.domain_id {
            return Err(SerializeError::MixedDomains {
                first: first.domain_id.clone(),
                second: s.domain_id.clone(),
            });
        }
    }
    let mut blocks = Vec::with_capacity(samples.len());
    for s in samples {
        let body = record_body(s, schema, template, false)?;
        let answer = if s.label == 1 { "Yes" } else { "No" };
        blocks.push(format!("{body}\nAnswer: {answer}."));
    }
    Ok(DomainInfoDoc {
        domain_id: first.domain_id.clone(),
        source_kind: DomainInfoSource::TargetSamples,
        text: format!("Here are some examples of the data:\n{}", blocks.join("\n\n")),
    })
}

/// Prompt for embedding a domain-information document: same instruct line,
/// the document text as the query.
pub fn domain_doc_prompt(doc: &DomainInfoDoc, task: &TaskDescription) -> PromptText {
    PromptText {
        text: format!("Instruct: {}\nQuery: {}", task.text, doc.text),
        synthetic_proxy: None,
    }
}

/// On-disk serialization config: task description, templates, and overrides
/// for one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SerializerConfig {
    pub schema_version: u32,
    pub task: String,
    #[serde(flatten)]
    pub template: SerializationTemplate,
}

impl SerializerConfig {
    pub fn load(path: &std::path::Path) -> Result<SerializerConfig, SerializeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SerializeError::Config(format!("{}: {e}", path.display())))?;
        let cfg: SerializerConfig = serde_json::from_str(&text)
            .map_err(|e| SerializeError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != 1 {
            return Err(SerializeError::Config(format!(
                "unsupported schema_version {}",
                cfg.schema_version
            )));
        }
        cfg.template.validate()?;
        Ok(cfg)
    }
}
