//! Synthetic source→target pair generator with a hidden-confounder Y|X-shift.
//!
//! Mechanism: each record has k observed numeric covariates and one hidden
//! confounder u that never appears among the tabular features. Labels follow a
//! logistic conditional in the observed covariates plus a domain-dependent
//! coefficient on u. Varying that coefficient across domains changes P(Y|X)
//! while leaving the observed covariate law untouched (pure Y|X-shift);
//! `x_shift_strength` instead moves the covariate means (pure X-shift).
//!
//! Each record carries a noisy proxy of u so that the mock embedding provider
//! can expose confounder information the tabular features lack, the way an
//! LLM encoder carries world knowledge about a row.
//!
//! Observed values are emitted as integers near 50 (v = clamp(round(50+10z)))
//! so that serialized prompts tokenize into a compact, informative vocabulary.
//! The label conditional is computed from the emitted values, which keeps the
//! closed-form Bayes rules below exact for the data as observed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, FeatureValue, Record, Schema};
use crate::seeding::{self, derive_seed};

/// Slope on the standardized covariate score in the label logit.
const COVARIATE_SLOPE: f64 = 1.5;
/// Mean of the hidden confounder; a nonzero mean makes the observed-feature
/// Bayes rule domain-dependent instead of only recalibrating probabilities,
/// so the conditional shift is visible to observed-feature reference models.
const CONFOUNDER_MEAN: f64 = 0.5;
/// Standard deviation of the noise added to the confounder proxy channel.
const PROXY_NOISE: f64 = 0.25;
/// Emitted covariate scale: v = 50 + 10 z, clamped to [1, 99].
const EMIT_CENTER: f64 = 50.0;
const EMIT_SCALE: f64 = 10.0;
/// Fixed key for the per-domain structure (slot and shift direction), kept
/// independent of the record-draw seed so replicate draws of the same pair
/// describe the same shift setting.
const STRUCTURE_KEY: u64 = 0x75_1abd_0019_aa17;

/// Controls for the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Number of distinct domain parameterizations (domain ids are hashed
    /// into this many slots).
    pub n_domains: usize,
    /// Scales the domain-dependent coefficient on the hidden confounder.
    pub confounder_strength: f64,
    /// Scales the domain-dependent covariate mean shift.
    pub x_shift_strength: f64,
    /// Number of observed numeric covariates.
    pub n_features: usize,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_domains < 2 {
            return Err(DataError::Schema(format!(
                "shift spec needs at least 2 domains, got {}",
                self.n_domains
            )));
        }
        if self.n_features == 0 {
            return Err(DataError::Schema("shift spec needs n_features >= 1".into()));
        }
        if !self.confounder_strength.is_finite()
            || !self.x_shift_strength.is_finite()
            || self.confounder_strength < 0.0
            || self.x_shift_strength < 0.0
        {
            return Err(DataError::Schema(
                "shift strengths must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let names: Vec<String> = (0..self.n_features).map(|j| format!("x{j}")).collect();
        Schema::numeric(&names, "outcome", "1")
    }
}

/// Closed-form view of the generator's per-domain parameters and Bayes rules.
/// This is the laboratory's diagnostic surface: tests compare trained models
/// and shift estimators against it.
#[derive(Debug, Clone)]
pub struct DomainOracle {
    spec: ShiftSpec,
}

impl DomainOracle {
    pub fn new(spec: &ShiftSpec) -> Result<DomainOracle, DataError> {
        spec.validate()?;
        Ok(DomainOracle { spec: spec.clone() })
    }

    /// Stable slot for a domain id, independent of the record-draw seed.
    pub fn domain_index(&self, domain_id: &str) -> usize {
        (derive_seed(STRUCTURE_KEY, &["domain-slot", domain_id]) % self.spec.n_domains as u64)
            as usize
    }

    /// Coefficient on the hidden confounder for this domain. The sign
    /// alternates with the domain slot so opposite-slot pairs carry the
    /// maximal conditional shift and same-parity pairs carry none.
    pub fn confounder_coefficient(&self, domain_id: &str) -> f64 {
        let sign = if self.domain_index(domain_id) % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        self.spec.confounder_strength * sign
    }

    /// Mean shift of the latent covariates (z scale) for this domain.
    pub fn covariate_shift(&self, domain_id: &str) -> Vec<f64> {
        let idx = self.domain_index(domain_id);
        let mut rng = seeding::rng_for(STRUCTURE_KEY, &["domain-dir", &idx.to_string()]);
        let mut dir: Vec<f64> = (0..self.spec.n_features)
            .map(|_| seeding::sample_normal(&mut rng))
            .collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
        for d in &mut dir {
            *d *= self.spec.x_shift_strength / norm;
        }
        dir
    }

    /// Standardized covariate score implied by emitted feature values.
    fn score(&self, values: &[Option<FeatureValue>]) -> f64 {
        let k = self.spec.n_features as f64;
        let sum: f64 = values
            .iter()
            .map(|v| {
                v.as_ref()
                    .and_then(FeatureValue::as_number)
                    .map(|x| (x - EMIT_CENTER) / EMIT_SCALE)
                    .unwrap_or(0.0)
            })
            .sum();
        sum / k.sqrt()
    }

    /// Log-odds of the positive class given observed values and confounder.
    pub fn full_logit(&self, domain_id: &str, values: &[Option<FeatureValue>], u: f64) -> f64 {
        COVARIATE_SLOPE * self.score(values) + self.confounder_coefficient(domain_id) * u
    }

    /// Log-odds discriminant of the observed-features Bayes rule: the
    /// confounder integrates out to its mean because the logistic is
    /// symmetric around zero.
    pub fn observed_logit(&self, domain_id: &str, values: &[Option<FeatureValue>]) -> f64 {
        COVARIATE_SLOPE * self.score(values)
            + self.confounder_coefficient(domain_id) * CONFOUNDER_MEAN
    }

    /// Decision of the observed-features Bayes rule.
    pub fn observed_decision(&self, domain_id: &str, values: &[Option<FeatureValue>]) -> u8 {
        if self.observed_logit(domain_id, values) > 0.0 {
            1
        } else {
            0
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn generate_domain(spec: &ShiftSpec, oracle: &DomainOracle, domain_id: &str, n: usize) -> Dataset {
    let shift = oracle.covariate_shift(domain_id);
    let gamma = oracle.confounder_coefficient(domain_id);
    let mut rng = seeding::rng_for(spec.seed, &["domain-records", domain_id]);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let mut values = Vec::with_capacity(spec.n_features);
        for shift_j in shift.iter().take(spec.n_features) {
            let z = seeding::sample_normal(&mut rng) + shift_j;
            let emitted = (EMIT_CENTER + EMIT_SCALE * z).round().clamp(1.0, 99.0);
            values.push(Some(FeatureValue::Number(emitted)));
        }
        let u = CONFOUNDER_MEAN + seeding::sample_normal(&mut rng);
        let proxy = u + PROXY_NOISE * seeding::sample_normal(&mut rng);
        let logit = oracle.full_logit(domain_id, &values, u);
        let _ = gamma; // gamma enters through full_logit
        let label = if rng.random::<f64>() < sigmoid(logit) {
            1
        } else {
            0
        };
        records.push(Record {
            record_id: i as u64,
            values,
            label,
            domain_id: domain_id.to_string(),
            confounder_proxy: Some(proxy),
        });
    }
    Dataset {
        schema: spec.schema(),
        records,
        domain_id: domain_id.to_string(),
    }
}

/// Generate a (source, target) dataset pair. Pure function of
/// (spec, ids, counts): identical arguments yield bit-identical datasets.
pub fn generate_pair(
    spec: &ShiftSpec,
    source_id: &str,
    target_id: &str,
    n_source: usize,
    n_target: usize,
) -> Result<(Dataset, Dataset), DataError> {
    spec.validate()?;
    if source_id == target_id {
        return Err(DataError::Schema(format!(
            "source and target ids must differ, both are {source_id:?}"
        )));
    }
    if n_source == 0 || n_target == 0 {
        return Err(DataError::Schema("pair counts must be >= 1".into()));
    }
    let oracle = DomainOracle::new(spec)?;
    let source = generate_domain(spec, &oracle, source_id, n_source);
    let target = generate_domain(spec, &oracle, target_id, n_target);
    Ok((source, target))
}
