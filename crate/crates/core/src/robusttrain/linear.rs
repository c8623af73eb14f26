//! Linear baselines trained by full-batch gradient descent: logistic
//! regression, linear squared-hinge SVM, their f-DRO variants, and a
//! Wasserstein-robust squared-hinge model.
//!
//! The Wasserstein model minimizes mean squared-hinge + ε‖w‖₂, the Lipschitz
//! surrogate that upper-bounds the Wasserstein-robust loss for linear
//! predictors.

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, l2_norm, Mat};

use super::{f_dro_weights, DivergenceKind, DroError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Logreg,
    SvmSqhinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.margin(x) > 0.0)
    }

    pub fn predict_all(&self, xs: &Mat) -> Vec<u8> {
        (0..xs.rows).map(|r| self.predict(xs.row(r))).collect()
    }

    /// P(label = 1 | x) under the logistic link.
    pub fn prob(&self, x: &[f64]) -> f64 {
        let m = self.margin(x);
        if m >= 0.0 {
            1.0 / (1.0 + (-m).exp())
        } else {
            let e = m.exp();
            e / (1.0 + e)
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinearTrainConfig {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        LinearTrainConfig {
            max_iters: 20_000,
            tolerance: 1e-7,
        }
    }
}

fn signed(label: u8) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Per-sample loss and its derivative with respect to the margin.
fn sample_loss(kind: LinearKind, y: f64, margin: f64) -> (f64, f64) {
    match kind {
        LinearKind::Logreg => {
            let z = y * margin;
            // ln(1 + e^{-z}) computed stably on both tails.
            let loss = if z > 0.0 {
                (-z).exp().ln_1p()
            } else {
                -z + z.exp().ln_1p()
            };
            let sig = if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            (loss, -y * (1.0 - sig))
        }
        LinearKind::SvmSqhinge => {
            let gap = (1.0 - y * margin).max(0.0);
            (gap * gap, -2.0 * gap * y)
        }
    }
}

struct Objective<'a> {
    xs: &'a Mat,
    ys: Vec<f64>,
    kind: LinearKind,
    l2_reg: f64,
    norm_penalty: f64,
    dro: Option<(DivergenceKind, f64)>,
}

impl Objective<'_> {
    /// Value and gradient at (w, b). For the DRO variants the gradient uses
    /// the worst-case weights of the current losses (Danskin).
    fn eval(&self, w: &[f64], b: f64) -> Result<(f64, Vec<f64>, f64), DroError> {
        let n = self.xs.rows;
        let mut losses = Vec::with_capacity(n);
        let mut dmargins = Vec::with_capacity(n);
        for r in 0..n {
            let m = dot(w, self.xs.row(r)) + b;
            let (l, dm) = sample_loss(self.kind, self.ys[r], m);
            losses.push(l);
            dmargins.push(dm);
        }
        let (value, weights) = match self.dro {
            None => (
                losses.iter().sum::<f64>() / n as f64,
                vec![1.0 / n as f64; n],
            ),
            Some((kind, eps)) => {
                let weights = f_dro_weights(&losses, kind, eps)?;
                let value: f64 = losses.iter().zip(&weights).map(|(l, q)| l * q).sum();
                (value, weights)
            }
        };
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for r in 0..n {
            let scale = weights[r] * dmargins[r];
            if scale == 0.0 {
                continue;
            }
            for (g, x) in gw.iter_mut().zip(self.xs.row(r)) {
                *g += scale * x;
            }
            gb += scale;
        }
        let mut value = value;
        if self.l2_reg > 0.0 {
            let norm2 = dot(w, w);
            value += 0.5 * self.l2_reg * norm2;
            for (g, wi) in gw.iter_mut().zip(w) {
                *g += self.l2_reg * wi;
            }
        }
        if self.norm_penalty > 0.0 {
            let norm = l2_norm(w);
            value += self.norm_penalty * norm;
            if norm > 1e-12 {
                for (g, wi) in gw.iter_mut().zip(w) {
                    *g += self.norm_penalty * wi / norm;
                }
            }
        }
        Ok((value, gw, gb))
    }
}

fn descend(obj: &Objective, dim: usize, cfg: &LinearTrainConfig) -> Result<LinearModel, DroError> {
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let (mut value, mut gw, mut gb) = obj.eval(&w, b)?;
    let mut stagnant = 0u32;
    for _ in 0..cfg.max_iters {
        let grad_norm = (dot(&gw, &gw) + gb * gb).sqrt();
        if grad_norm <= cfg.tolerance {
            return Ok(LinearModel { w, b });
        }
        // Backtracking line search on the descent direction -g.
        let mut step = 1.0;
        let mut improved = false;
        let previous = value;
        while step >= 1e-15 {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi - step * gi).collect();
            let bt = b - step * gb;
            let (vt, gwt, gbt) = obj.eval(&wt, bt)?;
            if vt <= value - 0.25 * step * grad_norm * grad_norm {
                w = wt;
                b = bt;
                value = vt;
                gw = gwt;
                gb = gbt;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        // Decrease at or below f64 resolution of the objective means the
        // iterate sits at its numerical floor; the gradient can do no better
        // than ~sqrt(eps · curvature) there.
        if !improved || previous - value <= 8.0 * f64::EPSILON * previous.abs() {
            stagnant += 1;
            if stagnant >= 5 {
                if grad_norm <= 1e-3 {
                    return Ok(LinearModel { w, b });
                }
                return Err(DroError::NoConvergence {
                    kind: "linear",
                    grad_norm,
                });
            }
        } else {
            stagnant = 0;
        }
    }
    let grad_norm = (dot(&gw, &gw) + gb * gb).sqrt();
    if grad_norm <= cfg.tolerance * 10.0 {
        return Ok(LinearModel { w, b });
    }
    Err(DroError::NoConvergence {
        kind: "linear",
        grad_norm,
    })
}

/// Logistic regression or squared-hinge SVM with L2 penalty `reg` on the
/// weights (bias unregularized).
pub fn train_linear(
    kind: LinearKind,
    xs: &Mat,
    labels: &[u8],
    reg: f64,
    cfg: &LinearTrainConfig,
) -> Result<LinearModel, DroError> {
    assert_eq!(xs.rows, labels.len(), "features/labels misaligned");
    let obj = Objective {
        xs,
        ys: labels.iter().map(|&y| signed(y)).collect(),
        kind,
        l2_reg: reg,
        norm_penalty: 0.0,
        dro: None,
    };
    descend(&obj, xs.cols, cfg)
}

/// Squared-hinge model robust to Wasserstein perturbations of radius ε:
/// mean squared-hinge + ε‖w‖₂.
pub fn train_wdro_linear(
    xs: &Mat,
    labels: &[u8],
    eps: f64,
    cfg: &LinearTrainConfig,
) -> Result<LinearModel, DroError> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(DroError::BadRadius(eps));
    }
    let obj = Objective {
        xs,
        ys: labels.iter().map(|&y| signed(y)).collect(),
        kind: LinearKind::SvmSqhinge,
        l2_reg: 0.0,
        norm_penalty: eps,
        dro: None,
    };
    descend(&obj, xs.cols, cfg)
}

/// Squared-hinge model minimizing the worst-case mean loss over a KL or χ²
/// ball of radius ε around the empirical distribution.
pub fn train_fdro_linear(
    kind: DivergenceKind,
    xs: &Mat,
    labels: &[u8],
    eps: f64,
    cfg: &LinearTrainConfig,
) -> Result<LinearModel, DroError> {
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(DroError::BadRadius(eps));
    }
    if !matches!(kind, DivergenceKind::Kl | DivergenceKind::Chi2) {
        return Err(DroError::BadRadius(eps));
    }
    let obj = Objective {
        xs,
        ys: labels.iter().map(|&y| signed(y)).collect(),
        kind: LinearKind::SvmSqhinge,
        l2_reg: 0.0,
        dro: Some((kind, eps)),
        norm_penalty: 0.0,
    };
    descend(&obj, xs.cols, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn two_point() -> (Mat, Vec<u8>) {
        (Mat::from_rows(&[vec![-1.0], vec![1.0]]), vec![0, 1])
    }

    #[test]
    fn logistic_two_point_matches_scan_oracle() {
        // By symmetry b* = 0 and w* solves sigmoid(-w) = reg·w; scan w on a
        // fine grid as the independent oracle.
        let (xs, ys) = two_point();
        let reg = 0.1;
        let model = train_linear(LinearKind::Logreg, &xs, &ys, reg, &Default::default()).unwrap();
        // Both points contribute ln(1 + e^{-w}) at b = 0.
        let mut best_w = 0.0;
        let mut best_val = f64::INFINITY;
        let mut w = 0.0f64;
        while w < 10.0 {
            let loss = (-w).exp().ln_1p() + 0.5 * reg * w * w;
            if loss < best_val {
                best_val = loss;
                best_w = w;
            }
            w += 1e-4;
        }
        assert!(
            (model.w[0] - best_w).abs() < 1e-4,
            "{} vs {}",
            model.w[0],
            best_w
        );
        assert!(model.b.abs() < 1e-5);
    }

    #[test]
    fn stronger_regularization_shrinks_weights() {
        let mut rng = seeding::rng_for(31, &["lin"]);
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 0..60 {
            let y = i % 2;
            let c = if y == 1 { 1.5 } else { -1.5 };
            rows.push(vec![
                c + 0.5 * seeding::sample_normal(&mut rng),
                0.5 * seeding::sample_normal(&mut rng),
            ]);
            ys.push(y as u8);
        }
        let xs = Mat::from_rows(&rows);
        let small = train_linear(LinearKind::Logreg, &xs, &ys, 1e-3, &Default::default()).unwrap();
        let large = train_linear(LinearKind::Logreg, &xs, &ys, 1e4, &Default::default()).unwrap();
        assert!(
            l2_norm(&large.w) < l2_norm(&small.w),
            "{} !< {}",
            l2_norm(&large.w),
            l2_norm(&small.w)
        );
    }

    #[test]
    fn wdro_zero_radius_coincides_with_plain_sqhinge() {
        let mut rng = seeding::rng_for(7, &["wdro"]);
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let c = if y == 1 { 1.0 } else { -1.0 };
            rows.push(vec![c + 0.3 * seeding::sample_normal(&mut rng)]);
            ys.push(y as u8);
        }
        let xs = Mat::from_rows(&rows);
        let plain =
            train_linear(LinearKind::SvmSqhinge, &xs, &ys, 0.0, &Default::default()).unwrap();
        let wdro = train_wdro_linear(&xs, &ys, 0.0, &Default::default()).unwrap();
        assert!((plain.w[0] - wdro.w[0]).abs() < 1e-5);
        assert!((plain.b - wdro.b).abs() < 1e-5);
        // A positive radius shrinks the weight norm.
        let robust = train_wdro_linear(&xs, &ys, 0.5, &Default::default()).unwrap();
        assert!(l2_norm(&robust.w) < l2_norm(&plain.w));
    }

    #[test]
    fn fdro_linear_reduces_to_erm_at_zero_radius() {
        // Overlapping classes keep the squared-hinge minimizer unique, so
        // the two code paths must land on the same parameters.
        let mut rng = seeding::rng_for(17, &["fdro"]);
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 0..30 {
            let y = i % 2;
            let c = if y == 1 { 0.6 } else { -0.6 };
            rows.push(vec![
                c + seeding::sample_normal(&mut rng),
                seeding::sample_normal(&mut rng),
            ]);
            ys.push(y as u8);
        }
        let xs = Mat::from_rows(&rows);
        let erm = train_linear(LinearKind::SvmSqhinge, &xs, &ys, 0.0, &Default::default()).unwrap();
        for kind in [DivergenceKind::Kl, DivergenceKind::Chi2] {
            let dro = train_fdro_linear(kind, &xs, &ys, 0.0, &Default::default()).unwrap();
            for (a, b) in erm.w.iter().zip(&dro.w) {
                assert!((a - b).abs() < 1e-5, "{kind:?}");
            }
        }
    }

    #[test]
    fn logistic_probabilities_are_calibrated_on_symmetric_data() {
        let (xs, ys) = two_point();
        let model = train_linear(LinearKind::Logreg, &xs, &ys, 0.5, &Default::default()).unwrap();
        let p_pos = model.prob(&[1.0]);
        let p_neg = model.prob(&[-1.0]);
        assert!((p_pos + p_neg - 1.0).abs() < 1e-9);
        assert!(p_pos > 0.5);
    }
}
