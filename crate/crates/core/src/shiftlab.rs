//! Shift quantification: decompose a source→target performance drop into
//! covariate (X) and conditional (Y|X) components, estimate the HΔH proxy
//! distance between covariate marginals, and evaluate the mixture-training
//! generalization bound as a computable diagnostic.
//!
//! The decomposition compares the evaluated model's 0/1 loss on a shared
//! covariate distribution S built from overlap weights: a domain classifier
//! gives density ratios r(x), source records are weighted by min(1, r) and
//! target records by min(1, 1/r), so S concentrates where both domains have
//! mass. A loss gap on S reflects a changed conditional (Y|X); whatever
//! remains of the total drop is attributed to the covariate shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::robusttrain::{train_linear, DroError, LinearKind, LinearModel, LinearTrainConfig};

#[derive(Debug, Error)]
pub enum ShiftError {
    #[error("degenerate overlap: effective sample size {ess:.1} on the {side} side (need >= 10)")]
    DegenerateOverlap { side: &'static str, ess: f64 },
    #[error("need at least 20 pooled samples, got {0}")]
    TooFewSamples(usize),
    #[error("bound input out of range: {0}")]
    BadBoundInput(String),
    #[error("domain classifier failed: {0}")]
    Classifier(#[from] DroError),
    #[error("feature widths disagree: {a} vs {b}")]
    WidthMismatch { a: usize, b: usize },
}

/// Attribution of a performance drop. The identity
/// `x_term + yx_term = total_drop` holds exactly by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftDecomposition {
    pub total_drop: f64,
    pub x_term: f64,
    pub yx_term: f64,
    pub reference_model_id: String,
}

/// Density-ratio clip bound: keeps overlap weights bounded on small samples.
const RATIO_CLIP: f64 = 50.0;

fn domain_classifier(
    source_x: &Mat,
    target_x: &Mat,
    reg: f64,
) -> Result<LinearModel, ShiftError> {
    if source_x.cols != target_x.cols {
        return Err(ShiftError::WidthMismatch {
            a: source_x.cols,
            b: target_x.cols,
        });
    }
    let mut rows = Vec::with_capacity(source_x.rows + target_x.rows);
    let mut labels = Vec::with_capacity(rows.capacity());
    for r in 0..source_x.rows {
        rows.push(source_x.row(r).to_vec());
        labels.push(0u8);
    }
    for r in 0..target_x.rows {
        rows.push(target_x.row(r).to_vec());
        labels.push(1u8);
    }
    let pooled = Mat::from_rows(&rows);
    Ok(train_linear(
        LinearKind::Logreg,
        &pooled,
        &labels,
        reg,
        &LinearTrainConfig::default(),
    )?)
}

/// Effective number of records behind a set of overlap weights. Weights are
/// capped at 1, so their total already counts effective overlap records; the
/// variance-based (Σw)²/Σw² term additionally penalizes concentration. The
/// minimum of the two is the degeneracy measure.
fn effective_sample_size(weights: &[f64]) -> f64 {
    let sum: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sq == 0.0 {
        0.0
    } else {
        (sum * sum / sq).min(sum)
    }
}

/// Decompose the total 0/1-loss drop of `eval_losses` (per-record losses of
/// the evaluated model on each side) into X and Y|X terms using the overlap
/// distribution built on the given covariates.
///
/// `source_x`/`target_x` carry the tabular covariates the domain classifier
/// sees; `source_loss`/`target_loss` the evaluated model's per-record 0/1
/// losses aligned with them.
pub fn disde_decompose(
    source_x: &Mat,
    source_loss: &[f64],
    target_x: &Mat,
    target_loss: &[f64],
    reference_model_id: &str,
) -> Result<ShiftDecomposition, ShiftError> {
    assert_eq!(source_x.rows, source_loss.len(), "source losses misaligned");
    assert_eq!(target_x.rows, target_loss.len(), "target losses misaligned");

    // Cross-fitted density ratios: fit the domain classifier on one half
    // (by index parity) and score the other, so in-sample overfitting does
    // not bias the overlap weights toward either side.
    let halves = |xs: &Mat| -> (Vec<usize>, Vec<usize>) {
        (0..xs.rows).partition(|i| i % 2 == 0)
    };
    let (src_even, src_odd) = halves(source_x);
    let (tgt_even, tgt_odd) = halves(target_x);
    let submat = |xs: &Mat, idx: &[usize]| -> Mat {
        Mat::from_rows(&idx.iter().map(|&i| xs.row(i).to_vec()).collect::<Vec<_>>())
    };
    let clf_even = domain_classifier(
        &submat(source_x, &src_even),
        &submat(target_x, &tgt_even),
        1.0,
    )?;
    let clf_odd = domain_classifier(
        &submat(source_x, &src_odd),
        &submat(target_x, &tgt_odd),
        1.0,
    )?;

    // Prior-corrected density ratio r(x) = p(target|x)/p(source|x) ·
    // (n_source/n_target), clipped; each record is scored by the classifier
    // fit on the opposite half.
    let prior = source_x.rows as f64 / target_x.rows as f64;
    let ratio = |clf: &LinearModel, x: &[f64]| -> f64 {
        let p = clf.prob(x).clamp(1e-12, 1.0 - 1e-12);
        (p / (1.0 - p) * prior).clamp(1.0 / RATIO_CLIP, RATIO_CLIP)
    };
    let pick = |i: usize| -> &LinearModel {
        if i % 2 == 0 {
            &clf_odd
        } else {
            &clf_even
        }
    };

    // Overlap weights: source ∝ min(1, r), target ∝ min(1, 1/r).
    let w_source: Vec<f64> = (0..source_x.rows)
        .map(|r| ratio(pick(r), source_x.row(r)).min(1.0))
        .collect();
    let w_target: Vec<f64> = (0..target_x.rows)
        .map(|r| (1.0 / ratio(pick(r), target_x.row(r))).min(1.0))
        .collect();
    for (side, w) in [("source", &w_source), ("target", &w_target)] {
        let ess = effective_sample_size(w);
        if ess < 10.0 {
            return Err(ShiftError::DegenerateOverlap { side, ess });
        }
    }

    let weighted_mean = |loss: &[f64], w: &[f64]| -> f64 {
        let sum: f64 = w.iter().sum();
        loss.iter().zip(w).map(|(l, wi)| l * wi).sum::<f64>() / sum
    };
    let err_source: f64 = source_loss.iter().sum::<f64>() / source_loss.len() as f64;
    let err_target: f64 = target_loss.iter().sum::<f64>() / target_loss.len() as f64;
    let total_drop = err_target - err_source;
    let yx_term = weighted_mean(target_loss, &w_target) - weighted_mean(source_loss, &w_source);
    // x_term is defined as the remainder so the identity is exact.
    let x_term = total_drop - yx_term;
    Ok(ShiftDecomposition {
        total_drop,
        x_term,
        yx_term,
        reference_model_id: reference_model_id.to_string(),
    })
}

/// HΔH proxy distance between two covariate samples: train a linear domain
/// classifier on half the pooled data, score it on the held-out half, and
/// return 2·(1 − 2·error) floored at zero. Values live in [0, 2].
pub fn hdh_proxy(source_x: &Mat, target_x: &Mat, seed: u64) -> Result<f64, ShiftError> {
    if source_x.cols != target_x.cols {
        return Err(ShiftError::WidthMismatch {
            a: source_x.cols,
            b: target_x.cols,
        });
    }
    let pooled = source_x.rows + target_x.rows;
    if pooled < 20 {
        return Err(ShiftError::TooFewSamples(pooled));
    }
    let mut rows: Vec<(Vec<f64>, u8)> = Vec::with_capacity(pooled);
    for r in 0..source_x.rows {
        rows.push((source_x.row(r).to_vec(), 0));
    }
    for r in 0..target_x.rows {
        rows.push((target_x.row(r).to_vec(), 1));
    }
    let mut rng = crate::seeding::rng_for(seed, &["hdh-split"]);
    let order = crate::seeding::shuffled_indices(&mut rng, pooled);
    let half = pooled / 2;
    let build = |idx: &[usize]| -> (Mat, Vec<u8>) {
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].0.clone()).collect();
        let ys: Vec<u8> = idx.iter().map(|&i| rows[i].1).collect();
        (Mat::from_rows(&xs), ys)
    };
    let (train_x, train_y) = build(&order[..half]);
    let (held_x, held_y) = build(&order[half..]);
    let clf = train_linear(
        LinearKind::Logreg,
        &train_x,
        &train_y,
        1e-2,
        &LinearTrainConfig::default(),
    )?;
    let errors = clf
        .predict_all(&held_x)
        .iter()
        .zip(&held_y)
        .filter(|(p, y)| p != y)
        .count();
    let err = errors as f64 / held_y.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * err)).max(0.0))
}

/// Plug-in upper estimate of inf_h { ε_source(h) + ε_target(h) }: train one
/// linear model on the pooled labeled data and sum its two empirical errors.
pub fn joint_error(
    source_x: &Mat,
    source_y: &[u8],
    target_x: &Mat,
    target_y: &[u8],
) -> Result<f64, ShiftError> {
    if source_x.cols != target_x.cols {
        return Err(ShiftError::WidthMismatch {
            a: source_x.cols,
            b: target_x.cols,
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(source_x.rows + target_x.rows);
    let mut ys = Vec::with_capacity(rows.capacity());
    for r in 0..source_x.rows {
        rows.push(source_x.row(r).to_vec());
        ys.push(source_y[r]);
    }
    for r in 0..target_x.rows {
        rows.push(target_x.row(r).to_vec());
        ys.push(target_y[r]);
    }
    let pooled = Mat::from_rows(&rows);
    let clf = train_linear(
        LinearKind::Logreg,
        &pooled,
        &ys,
        1e-3,
        &LinearTrainConfig::default(),
    )?;
    let err = |xs: &Mat, ys: &[u8]| -> f64 {
        clf.predict_all(xs)
            .iter()
            .zip(ys)
            .filter(|(p, y)| p != y)
            .count() as f64
            / ys.len() as f64
    };
    Ok(err(source_x, source_y) + err(target_x, target_y))
}

/// Inputs to the mixture-training generalization bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Weight on the target empirical error, in [0, 1].
    pub alpha: f64,
    /// Fraction of the m samples drawn from the target, in (0, 1).
    pub beta: f64,
    /// Total sample count.
    pub m: usize,
    /// Capacity parameter (VC-style), supplied by the user as a diagnostic.
    pub d: usize,
    /// Confidence level, in (0, 1).
    pub delta: f64,
    /// Estimated HΔH distance between covariate marginals, in [0, 2].
    pub hdh: f64,
    /// Estimated joint error inf_h {ε_source(h) + ε_target(h)}, in [0, 2].
    pub joint_err: f64,
}

/// Excess-target-risk bound for the α-weighted empirical minimizer:
///
/// 4·√(α²/β + (1−α)²/(1−β)) · √((2d·log(2(m+1)) + 2·log(8/δ))/m)
///   + 2(1−α)·hdh + 2(1−α)·joint_err
pub fn bound_value(b: &BoundInputs) -> Result<f64, ShiftError> {
    let fail = |msg: String| Err(ShiftError::BadBoundInput(msg));
    if !(0.0..=1.0).contains(&b.alpha) {
        return fail(format!("alpha {} outside [0,1]", b.alpha));
    }
    if !(b.beta > 0.0 && b.beta < 1.0) {
        return fail(format!("beta {} outside (0,1)", b.beta));
    }
    if !(b.delta > 0.0 && b.delta < 1.0) {
        return fail(format!("delta {} outside (0,1)", b.delta));
    }
    if !(0.0..=2.0).contains(&b.hdh) {
        return fail(format!("hdh {} outside [0,2]", b.hdh));
    }
    if !(0.0..=2.0).contains(&b.joint_err) {
        return fail(format!("joint_err {} outside [0,2]", b.joint_err));
    }
    if b.m == 0 {
        return fail("m must be positive".into());
    }
    let m = b.m as f64;
    let d = b.d as f64;
    let mix = (b.alpha * b.alpha / b.beta + (1.0 - b.alpha).powi(2) / (1.0 - b.beta)).sqrt();
    let complexity = ((2.0 * d * (2.0 * (m + 1.0)).ln() + 2.0 * (8.0 / b.delta).ln()) / m).sqrt();
    Ok(4.0 * mix * complexity + 2.0 * (1.0 - b.alpha) * b.hdh + 2.0 * (1.0 - b.alpha) * b.joint_err)
}
