//! Datasets: typed schemas, CSV ingestion, balanced subsampling, and a
//! synthetic source→target generator with a controllable hidden-confounder
//! Y|X-shift.

mod csv;
mod synth;
mod tabular;

pub use csv::{load_csv, read_dataset_cache, write_dataset_cache};
pub use synth::{generate_pair, DomainOracle, ShiftSpec};
pub use tabular::TabularEncoder;

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::seeding;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("insufficient {class} records: need {need}, have {have}")]
    InsufficientClass {
        class: &'static str,
        need: usize,
        have: usize,
    },
    #[error("dataset cache error on {path}: {message}")]
    Cache { path: String, message: String },
}

/// Feature kind declared by a schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Numeric,
}

/// One feature column: name, kind, and (for categoricals) the code→text map
/// used when rendering values as prose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_labels: Option<std::collections::BTreeMap<String, String>>,
}

/// Ordered feature descriptors plus the label column contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<FeatureDescriptor>,
    pub label_name: String,
    pub positive_label: String,
}

impl Schema {
    /// Validate invariants: unique feature names, label name distinct.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(DataError::Schema(format!(
                    "duplicate feature name {:?}",
                    f.name
                )));
            }
        }
        if seen.contains(self.label_name.as_str()) {
            return Err(DataError::Schema(format!(
                "label column {:?} collides with a feature name",
                self.label_name
            )));
        }
        Ok(())
    }

    pub fn arity(&self) -> usize {
        self.features.len()
    }

    /// Numeric-only schema used by the synthetic generator.
    pub fn numeric(feature_names: &[String], label_name: &str, positive_label: &str) -> Schema {
        Schema {
            features: feature_names
                .iter()
                .map(|name| FeatureDescriptor {
                    name: name.clone(),
                    kind: FeatureKind::Numeric,
                    value_labels: None,
                })
                .collect(),
            label_name: label_name.to_string(),
            positive_label: positive_label.to_string(),
        }
    }
}

/// A cell value; `None` in a record means the cell is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Number(f64),
    Code(String),
}

impl FeatureValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(x) => Some(*x),
            FeatureValue::Code(_) => None,
        }
    }
}

/// One labeled row. `confounder_proxy` is a synthetic-only side channel: the
/// generator's noisy view of the hidden confounder, excluded from the tabular
/// features but exposed to the mock embedding provider.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub record_id: u64,
    pub values: Vec<Option<FeatureValue>>,
    pub label: u8,
    pub domain_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confounder_proxy: Option<f64>,
}

/// Immutable collection of records from one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    pub records: Vec<Record>,
    pub domain_id: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    fn class_indices(&self, label: u8) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Subset by record positions, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            domain_id: self.domain_id.clone(),
        }
    }
}

/// Tracks record ids already handed out by balanced draws so later draws from
/// the same dataset can be kept disjoint.
#[derive(Debug, Clone, Default)]
pub struct DrawTracker {
    used: BTreeSet<u64>,
}

impl DrawTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, record_id: u64) -> bool {
        self.used.contains(&record_id)
    }

    pub fn mark(&mut self, record_id: u64) {
        self.used.insert(record_id);
    }

    pub fn is_disjoint_from(&self, other: &DrawTracker) -> bool {
        self.used.is_disjoint(&other.used)
    }
}

/// Draw exactly n/2 positives and n/2 negatives without replacement,
/// deterministic in `seed`. Records already marked in `tracker` are skipped,
/// and the drawn records are marked so later draws stay disjoint.
pub fn sample_balanced(
    dataset: &Dataset,
    n: usize,
    seed: u64,
    tracker: &mut DrawTracker,
) -> Result<Dataset, DataError> {
    if n % 2 != 0 {
        return Err(DataError::Schema(format!(
            "balanced sample size must be even, got {n}"
        )));
    }
    let per_class = n / 2;
    let mut rng = seeding::rng_for(seed, &["sample_balanced", &dataset.domain_id]);

    let mut chosen = Vec::with_capacity(n);
    for (label, class_name) in [(1u8, "positive"), (0u8, "negative")] {
        let pool: Vec<usize> = dataset
            .class_indices(label)
            .into_iter()
            .filter(|&i| !tracker.contains(dataset.records[i].record_id))
            .collect();
        if pool.len() < per_class {
            return Err(DataError::InsufficientClass {
                class: class_name,
                need: per_class,
                have: pool.len(),
            });
        }
        let order = seeding::shuffled_indices(&mut rng, pool.len());
        for &k in order.iter().take(per_class) {
            chosen.push(pool[k]);
        }
    }
    chosen.sort_unstable();
    for &i in &chosen {
        tracker.mark(dataset.records[i].record_id);
    }
    Ok(dataset.subset(&chosen))
}
