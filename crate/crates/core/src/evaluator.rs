//! Metrics and protocol: Macro F1, hyperparameter selection on the balanced
//! validation set, the FractionBest ratio, and worst-K aggregation by
//! Y|X-shift magnitude.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({got}) and labels ({want}) differ in length")]
    LengthMismatch { want: usize, got: usize },
    #[error("inputs must be nonempty")]
    Empty,
    #[error("non-finite score for method {method:?} in setting {setting:?}")]
    NonFiniteScore { setting: String, method: String },
    #[error("fraction_best needs at least 2 methods, got {0}")]
    TooFewMethods(usize),
    #[error("setting {0:?} carries no yx_term")]
    MissingYxTerm(String),
    #[error("k = {k} exceeds the {n} available settings")]
    KTooLarge { k: usize, n: usize },
}

/// One benchmark measurement: a (source, target, method, config, seed) cell.
/// Serializes with the result-stream key names (source, target, method, ...).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(rename = "source")]
    pub source_id: String,
    #[serde(rename = "target")]
    pub target_id: String,
    #[serde(rename = "method")]
    pub method_id: String,
    pub config_id: String,
    pub seed: u64,
    pub macro_f1_val: f64,
    pub macro_f1_target: f64,
    pub yx_term: f64,
    pub x_term: f64,
    pub wall_ms: u64,
}

impl EvalRecord {
    pub fn setting(&self) -> String {
        format!("{}->{}", self.source_id, self.target_id)
    }
}

/// Unweighted mean of the per-class F1 scores over classes {0, 1}. A class
/// with no predicted and no actual positives contributes F1 = 0, which
/// penalizes degenerate constant predictors.
pub fn macro_f1(predictions: &[u8], labels: &[u8]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            want: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    for class in [0u8, 1u8] {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p == class, y == class) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => {}
            }
        }
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            sum += 2.0 * tp / denom;
        }
    }
    Ok(sum / 2.0)
}

/// Seeded uniform subsample of grid indices, returned in ascending order so
/// tie-breaking by grid position stays meaningful. Identity when n <= cap.
pub fn grid_subsample(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = seeding::rng_for(seed, &["grid-subsample"]);
    let mut order = seeding::shuffled_indices(&mut rng, n);
    order.truncate(cap);
    order.sort_unstable();
    order
}

/// Pick the candidate with the highest validation Macro F1; ties break by
/// earliest grid order. When more than `cap` candidates are offered, a
/// seeded uniform subsample of `cap` is evaluated instead (grid indices are
/// returned so callers can trace the choice).
pub fn select_hyperparams(
    val_scores: &[f64],
    cap: usize,
    seed: u64,
) -> Result<(usize, Vec<usize>), EvalError> {
    if val_scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let candidates = grid_subsample(val_scores.len(), cap, seed);
    let mut best = candidates[0];
    for &idx in &candidates[1..] {
        if val_scores[idx] > val_scores[best] {
            best = idx;
        }
    }
    Ok((best, candidates))
}

/// Default number of configurations evaluated per method.
pub const GRID_CAP: usize = 200;

/// FractionBest outcome for one method set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionBestReport {
    /// Per-method ratio |S(Δ) ∩ S_M| / |S(Δ)|; `None` when |S(Δ)| = 0.
    pub ratios: Option<BTreeMap<String, f64>>,
    /// Number of settings with a decisive winner (gap > Δ).
    pub decisive_settings: usize,
    pub delta: f64,
}

/// Eq.-style FractionBest: for every setting, find the strict best and
/// second-best scores; the setting is decisive when best − second > Δ, and
/// counts toward the winning method. Exact first-place ties have gap 0 and
/// never count. Settings map method → score.
pub fn fraction_best(
    settings: &BTreeMap<String, BTreeMap<String, f64>>,
    delta: f64,
) -> Result<FractionBestReport, EvalError> {
    if settings.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut wins: BTreeMap<String, usize> = BTreeMap::new();
    let mut method_set: Option<Vec<String>> = None;
    let mut decisive = 0usize;
    for (setting, scores) in settings {
        if scores.len() < 2 {
            return Err(EvalError::TooFewMethods(scores.len()));
        }
        for (method, s) in scores {
            if !s.is_finite() {
                return Err(EvalError::NonFiniteScore {
                    setting: setting.clone(),
                    method: method.clone(),
                });
            }
        }
        let methods: Vec<String> = scores.keys().cloned().collect();
        match &method_set {
            None => method_set = Some(methods),
            Some(m) => {
                if *m != methods {
                    return Err(EvalError::TooFewMethods(scores.len()));
                }
            }
        }
        // Strict maximum: ties for first exclude the setting.
        let mut best: Option<(&String, f64)> = None;
        let mut second = f64::NEG_INFINITY;
        let mut tie = false;
        for (method, &s) in scores {
            match best {
                None => best = Some((method, s)),
                Some((_, bs)) if s > bs => {
                    second = bs;
                    tie = false;
                    best = Some((method, s));
                }
                Some((_, bs)) => {
                    if s == bs {
                        tie = true;
                    }
                    if s > second {
                        second = s;
                    }
                }
            }
        }
        let (winner, best_score) = best.expect("nonempty scores");
        if !tie && best_score - second > delta {
            decisive += 1;
            *wins.entry(winner.clone()).or_insert(0) += 1;
        }
    }
    let ratios = if decisive == 0 {
        None
    } else {
        let methods = method_set.expect("at least one setting");
        Some(
            methods
                .into_iter()
                .map(|m| {
                    let w = wins.get(&m).copied().unwrap_or(0);
                    (m, w as f64 / decisive as f64)
                })
                .collect(),
        )
    };
    Ok(FractionBestReport {
        ratios,
        decisive_settings: decisive,
        delta,
    })
}

/// One setting's aggregate for worst-K selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingAggregate {
    pub source_id: String,
    pub target_id: String,
    pub yx_term: f64,
    /// Mean target Macro F1 per method over the setting's records.
    pub method_means: BTreeMap<String, f64>,
}

/// Sort settings by yx_term descending (ties by (source, target) lexicographic),
/// keep the top k, and return the selected settings plus per-method means
/// over that subset.
pub fn worst_k(
    settings: &[SettingAggregate],
    k: usize,
) -> Result<(Vec<SettingAggregate>, BTreeMap<String, f64>), EvalError> {
    if k > settings.len() {
        return Err(EvalError::KTooLarge {
            k,
            n: settings.len(),
        });
    }
    for s in settings {
        if !s.yx_term.is_finite() {
            return Err(EvalError::MissingYxTerm(format!(
                "{}->{}",
                s.source_id, s.target_id
            )));
        }
    }
    let mut sorted: Vec<&SettingAggregate> = settings.iter().collect();
    sorted.sort_by(|a, b| {
        b.yx_term
            .partial_cmp(&a.yx_term)
            .expect("finite yx terms")
            .then_with(|| (&a.source_id, &a.target_id).cmp(&(&b.source_id, &b.target_id)))
    });
    let selected: Vec<SettingAggregate> = sorted.into_iter().take(k).cloned().collect();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in &selected {
        for (m, v) in &s.method_means {
            let e = sums.entry(m.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let means = sums
        .into_iter()
        .map(|(m, (sum, n))| (m, sum / n as f64))
        .collect();
    Ok((selected, means))
}
