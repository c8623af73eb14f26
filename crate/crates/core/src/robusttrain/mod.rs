//! Distributionally robust objectives.
//!
//! The ambiguity set is a ball around the empirical distribution. For
//! f-divergences the worst-case expected loss
//!   sup { E_Q[loss] : D_f(Q ‖ P̂) ≤ ε }
//! is computed through its two-variable dual
//!   inf_{λ>0, η}  λε + η + λ · mean(f*((loss − η)/λ))
//! with conjugates f*_kl(s) = eˢ − 1 and f*_χ²(s) = s + s²/4 for s ≥ −2
//! (−1 below). CVaR has the exact fractional-tail form and doubles as the
//! per-batch loss head for robust neural training; Wasserstein robustness is
//! handled for linear models in the `linear` submodule.

mod linear;

pub use linear::{
    train_fdro_linear, train_linear, train_wdro_linear, LinearKind, LinearModel,
    LinearTrainConfig,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::neuralcore::{self, MlpSpec, ModelError, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum DroError {
    #[error("losses must be nonempty")]
    Empty,
    #[error("worst-case ratio must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("radius must be finite and nonnegative, got {0}")]
    BadRadius(f64),
    #[error("non-finite loss at index {0}")]
    NonFinite(usize),
    #[error("{kind} solver did not converge: final gradient norm {grad_norm}")]
    NoConvergence { kind: &'static str, grad_norm: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    Kl,
    Chi2,
    Cvar,
    WassersteinLinear,
}

/// Robustness configuration: a divergence kind plus its radius (KL, χ²,
/// Wasserstein) or worst-case ratio (CVaR).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DroConfig {
    pub kind: DivergenceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst_case_ratio: Option<f64>,
}

impl DroConfig {
    pub fn cvar(alpha: f64) -> DroConfig {
        DroConfig {
            kind: DivergenceKind::Cvar,
            radius: None,
            worst_case_ratio: Some(alpha),
        }
    }

    pub fn ball(kind: DivergenceKind, radius: f64) -> DroConfig {
        DroConfig {
            kind,
            radius: Some(radius),
            worst_case_ratio: None,
        }
    }

    pub fn validate(&self) -> Result<(), DroError> {
        match self.kind {
            DivergenceKind::Cvar => {
                let a = self.worst_case_ratio.ok_or(DroError::BadAlpha(f64::NAN))?;
                if self.radius.is_some() {
                    return Err(DroError::BadRadius(self.radius.unwrap()));
                }
                if !(a > 0.0 && a <= 1.0) {
                    return Err(DroError::BadAlpha(a));
                }
            }
            _ => {
                let r = self.radius.ok_or(DroError::BadRadius(f64::NAN))?;
                if self.worst_case_ratio.is_some() {
                    return Err(DroError::BadAlpha(self.worst_case_ratio.unwrap()));
                }
                if !(r.is_finite() && r >= 0.0) {
                    return Err(DroError::BadRadius(r));
                }
            }
        }
        Ok(())
    }
}

fn check_losses(losses: &[f64]) -> Result<(), DroError> {
    if losses.is_empty() {
        return Err(DroError::Empty);
    }
    for (i, l) in losses.iter().enumerate() {
        if !l.is_finite() {
            return Err(DroError::NonFinite(i));
        }
    }
    Ok(())
}

/// Worst-case distribution weights for CVaR: the ⌈αn⌉ largest losses receive
/// mass 1/(αn), the boundary element fractionally so the tail mass is
/// exactly α. Returned in the input's index order; weights sum to one.
pub fn cvar_weights(losses: &[f64], alpha: f64) -> Result<Vec<f64>, DroError> {
    check_losses(losses)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DroError::BadAlpha(alpha));
    }
    let n = losses.len();
    let an = alpha * n as f64;
    let k = an.ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        losses[j]
            .partial_cmp(&losses[i])
            .expect("finite losses")
            .then(i.cmp(&j))
    });
    let mut weights = vec![0.0; n];
    for (rank, &idx) in order.iter().enumerate().take(k) {
        weights[idx] = if rank + 1 < k {
            1.0 / an
        } else {
            (an - (k - 1) as f64) / an
        };
    }
    Ok(weights)
}

/// CVaR at level α: the mean of the worst α-fraction of losses,
/// dual value min_η { η + mean((loss − η)₊)/α }.
pub fn cvar(losses: &[f64], alpha: f64) -> Result<f64, DroError> {
    let weights = cvar_weights(losses, alpha)?;
    Ok(losses.iter().zip(&weights).map(|(l, w)| l * w).sum())
}

/// KL conjugate f*(s) = eˢ − 1. The production path uses the closed-form
/// inner minimum below; tests confirm the two agree.
#[cfg_attr(not(test), allow(dead_code))]
fn conj_kl(s: f64) -> f64 {
    s.exp() - 1.0
}

/// χ² conjugate: f*(s) = s + s²/4 for s ≥ −2, −1 below.
fn conj_chi2(s: f64) -> f64 {
    if s >= -2.0 {
        s + s * s / 4.0
    } else {
        -1.0
    }
}

fn conj_chi2_prime(s: f64) -> f64 {
    if s >= -2.0 {
        1.0 + s / 2.0
    } else {
        0.0
    }
}

/// Dual objective at fixed λ for the KL ball (η minimized in closed form):
/// λε + λ·log mean exp(loss/λ), computed with max subtraction.
fn kl_dual_at(losses: &[f64], eps: f64, lambda: f64) -> f64 {
    let m = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean_exp: f64 =
        losses.iter().map(|l| ((l - m) / lambda).exp()).sum::<f64>() / losses.len() as f64;
    lambda * eps + m + lambda * mean_exp.ln()
}

/// Dual objective at fixed λ for the χ² ball; the inner η problem is convex
/// with nondecreasing derivative 1 − mean f*'((loss−η)/λ), solved by
/// bisection.
fn chi2_dual_at(losses: &[f64], eps: f64, lambda: f64) -> f64 {
    let n = losses.len() as f64;
    let h_prime = |eta: f64| -> f64 {
        1.0 - losses.iter().map(|l| conj_chi2_prime((l - eta) / lambda)).sum::<f64>() / n
    };
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = max;
    // h'(max) = 1 - mean of f*'(s<=0) >= 0, so max is a valid upper bracket.
    let mut lo = min - 1.0 - lambda;
    let mut gap = (max - min).max(1.0);
    for _ in 0..128 {
        if h_prime(lo) < 0.0 {
            break;
        }
        gap *= 2.0;
        lo -= gap;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h_prime(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let eta = 0.5 * (lo + hi);
    let mean_conj: f64 = losses.iter().map(|l| conj_chi2((l - eta) / lambda)).sum::<f64>() / n;
    lambda * eps + eta + lambda * mean_conj
}

fn dual_at(losses: &[f64], kind: DivergenceKind, eps: f64, lambda: f64) -> f64 {
    match kind {
        DivergenceKind::Kl => kl_dual_at(losses, eps, lambda),
        DivergenceKind::Chi2 => chi2_dual_at(losses, eps, lambda),
        _ => unreachable!("dual_at is for f-divergence balls"),
    }
}

/// Worst-case expected loss over an f-divergence ball of radius ε via the
/// two-variable dual, minimized by golden-section search on log λ.
pub fn f_dro_value(losses: &[f64], kind: DivergenceKind, eps: f64) -> Result<f64, DroError> {
    check_losses(losses)?;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(DroError::BadRadius(eps));
    }
    let scale = losses.iter().fold(1.0f64, |m, l| m.max(l.abs()));
    if eps == 0.0 {
        // Ball degenerates to the empirical distribution.
        return Ok(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    let (mut lo, mut hi) = ((1e-8 * scale).ln(), (1e8 * scale).ln());
    // Golden-section: the dual is convex in λ (partial minimization of a
    // jointly convex perspective function).
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = dual_at(losses, kind, eps, x1.exp());
    let mut f2 = dual_at(losses, kind, eps, x2.exp());
    for _ in 0..90 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = dual_at(losses, kind, eps, x1.exp());
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = dual_at(losses, kind, eps, x2.exp());
        }
    }
    Ok(f1.min(f2))
}

/// Worst-case weights for an f-divergence ball (the Danskin gradient of the
/// robust objective): q_i = f*'((loss_i − η*)/λ*)/n, which the optimal dual
/// pair normalizes to sum one. Exposed for the robust linear trainers.
pub fn f_dro_weights(
    losses: &[f64],
    kind: DivergenceKind,
    eps: f64,
) -> Result<Vec<f64>, DroError> {
    check_losses(losses)?;
    let n = losses.len() as f64;
    if eps == 0.0 {
        return Ok(vec![1.0 / n; losses.len()]);
    }
    let scale = losses.iter().fold(1.0f64, |m, l| m.max(l.abs()));
    let (mut lo, mut hi) = ((1e-8 * scale).ln(), (1e8 * scale).ln());
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = dual_at(losses, kind, eps, x1.exp());
    let mut f2 = dual_at(losses, kind, eps, x2.exp());
    for _ in 0..90 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = dual_at(losses, kind, eps, x1.exp());
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = dual_at(losses, kind, eps, x2.exp());
        }
    }
    let lambda = if f1 <= f2 { x1.exp() } else { x2.exp() };
    let weights = match kind {
        DivergenceKind::Kl => {
            let m = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tilts: Vec<f64> = losses.iter().map(|l| ((l - m) / lambda).exp()).collect();
            let z: f64 = tilts.iter().sum();
            tilts.iter().map(|t| t / z).collect()
        }
        DivergenceKind::Chi2 => {
            // Recover η* at the optimal λ by the same bisection.
            let h_prime = |eta: f64| -> f64 {
                1.0 - losses
                    .iter()
                    .map(|l| conj_chi2_prime((l - eta) / lambda))
                    .sum::<f64>()
                    / n
            };
            let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut hi_e = max;
            let mut lo_e = min - 1.0 - lambda;
            let mut gap = (max - min).max(1.0);
            for _ in 0..128 {
                if h_prime(lo_e) < 0.0 {
                    break;
                }
                gap *= 2.0;
                lo_e -= gap;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo_e + hi_e);
                if h_prime(mid) < 0.0 {
                    lo_e = mid;
                } else {
                    hi_e = mid;
                }
            }
            let eta = 0.5 * (lo_e + hi_e);
            let raw: Vec<f64> = losses
                .iter()
                .map(|l| conj_chi2_prime((l - eta) / lambda) / n)
                .collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|r| r / z.max(1e-300)).collect()
        }
        _ => unreachable!(),
    };
    Ok(weights)
}

/// CVaR-DRO training for the neural classifier: plain training with a
/// per-batch CVaR head. Backprop flows only through the fractional tail
/// weights; with α = 1 the weights are exactly uniform, so the trajectory is
/// bitwise identical to ERM under a shared seed.
pub fn train_dro_nn(
    spec: &MlpSpec,
    x: &Mat,
    labels: &[u8],
    cfg: &TrainConfig,
    dro: &DroConfig,
) -> Result<TrainOutcome, DroError> {
    dro.validate()?;
    let alpha = match (dro.kind, dro.worst_case_ratio) {
        (DivergenceKind::Cvar, Some(a)) => a,
        _ => return Err(DroError::BadAlpha(f64::NAN)),
    };
    let head = move |losses: &[f64]| -> Vec<f64> {
        cvar_weights(losses, alpha).expect("finite batch losses")
    };
    Ok(neuralcore::train(spec, x, labels, cfg, Some(&head))?)
}
