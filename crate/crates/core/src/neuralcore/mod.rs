//! The shallow feedforward classifier: forward pass, exact gradients, Adam
//! training with cross-entropy, and inverted dropout.
//!
//! Three architecture presets share one layer chain:
//!   tabular:  (in→H), dropout, ReLU, (H→H), ReLU, (H→2), softmax
//!   llm4096:  stem (4096→1024)(1024→256)(256→128) each ReLU, then the head
//!   llm8192:  stem (8192→2048)(2048→512)(512→128) each ReLU, then the head
//! where the head is (…→H), dropout, ReLU, (H→H), ReLU, (H→2), softmax.
//!
//! Optional per-layer low-rank deltas (W + A·B) and a trainable domain
//! embedding ride along inside `ModelParams`; the adaptation module decides
//! which of the three parameter groups a training run updates.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdaptationMeta};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    accumulate_outer, accumulate_row, matmul, matmul_transpose, matmul_transpose_gated, Mat,
};
use crate::seeding;

pub const LORA_RANK: usize = 16;
pub const DOMAIN_EMBED_DIM: usize = 4096;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input width {got} does not match expected {want}")]
    Shape { want: usize, got: usize },
    #[error("non-finite activation in layer {layer}")]
    Numeric { layer: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("low-rank deltas already attached")]
    LoraAlreadyAttached,
    #[error("model has no domain-embedding slot")]
    NoDomainSlot,
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tabular,
    Llm4096,
    Llm8192,
}

/// Architecture description. `input_dim` is the width of the full model
/// input: free for `tabular`, fixed 4096 / 8192 for the embedding presets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub preset: Preset,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub dropout_ratio: f64,
}

impl MlpSpec {
    pub fn tabular(input_dim: usize, hidden_dim: usize, dropout_ratio: f64) -> MlpSpec {
        MlpSpec {
            preset: Preset::Tabular,
            input_dim,
            hidden_dim,
            dropout_ratio,
        }
    }

    pub fn llm4096(hidden_dim: usize, dropout_ratio: f64) -> MlpSpec {
        MlpSpec {
            preset: Preset::Llm4096,
            input_dim: 4096,
            hidden_dim,
            dropout_ratio,
        }
    }

    pub fn llm8192(hidden_dim: usize, dropout_ratio: f64) -> MlpSpec {
        MlpSpec {
            preset: Preset::Llm8192,
            input_dim: 8192,
            hidden_dim,
            dropout_ratio,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self.preset {
            Preset::Tabular => {}
            Preset::Llm4096 if self.input_dim != 4096 => {
                return Err(ModelError::BadSpec(format!(
                    "llm4096 preset requires input_dim 4096, got {}",
                    self.input_dim
                )))
            }
            Preset::Llm8192 if self.input_dim != 8192 => {
                return Err(ModelError::BadSpec(format!(
                    "llm8192 preset requires input_dim 8192, got {}",
                    self.input_dim
                )))
            }
            _ => {}
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::BadSpec("zero dimension".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(ModelError::BadSpec(format!(
                "dropout ratio must be in [0,1), got {}",
                self.dropout_ratio
            )));
        }
        Ok(())
    }

    pub fn stem_dims(&self) -> Vec<(usize, usize)> {
        match self.preset {
            Preset::Tabular => vec![],
            Preset::Llm4096 => vec![(4096, 1024), (1024, 256), (256, 128)],
            Preset::Llm8192 => vec![(8192, 2048), (2048, 512), (512, 128)],
        }
    }

    /// Full (in, out) chain, stem followed by the classifier head.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = self.stem_dims();
        let head_in = dims.last().map(|&(_, o)| o).unwrap_or(self.input_dim);
        dims.push((head_in, self.hidden_dim));
        dims.push((self.hidden_dim, self.hidden_dim));
        dims.push((self.hidden_dim, 2));
        dims
    }

    /// Index of the linear layer whose output passes through dropout.
    pub fn dropout_layer(&self) -> usize {
        self.stem_dims().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// Input-major weights: rows = in_dim, cols = out_dim.
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Low-rank delta for one linear layer: effective weight = W + A·B.
/// A is (in × 16) with small normal init, B is (16 × out) zero-initialized,
/// so a freshly attached delta is an exact no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraDelta {
    pub a: Mat,
    pub b: Mat,
}

/// Domain-information embedding shared by every record of a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEmbedding {
    pub vector: Vec<f64>,
    pub domain_id: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Linear>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<Vec<LoraDelta>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_embedding: Option<DomainEmbedding>,
    /// Seed stream for dropout masks; advances with the global step during
    /// training so every mask is a pure function of (seed, step).
    pub dropout_seed: u64,
}

impl ModelParams {
    /// Width of the feature rows the model expects: the domain-embedding
    /// slot, when present, supplies the trailing 4096 inputs internally.
    pub fn expected_feature_width(&self, spec: &MlpSpec) -> usize {
        if self.domain_embedding.is_some() {
            spec.input_dim - DOMAIN_EMBED_DIM
        } else {
            spec.input_dim
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate,
            epochs,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
        }
    }
}

/// Which parameter groups a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainScope {
    pub base: bool,
    pub lora: bool,
    pub domain: bool,
}

impl TrainScope {
    pub fn base_and_domain() -> TrainScope {
        TrainScope {
            base: true,
            lora: false,
            domain: true,
        }
    }

    pub fn base_only() -> TrainScope {
        TrainScope {
            base: true,
            lora: false,
            domain: false,
        }
    }

    pub fn lora_only() -> TrainScope {
        TrainScope {
            base: false,
            lora: true,
            domain: false,
        }
    }

    pub fn domain_only() -> TrainScope {
        TrainScope {
            base: false,
            lora: false,
            domain: true,
        }
    }
}

/// Per-sample loss scalarization hook: maps the batch's per-sample losses to
/// backprop weights (summing to one). The default is the uniform mean; the
/// robust trainer plugs in CVaR tail weights.
pub type LossTransform<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

pub struct Gradients {
    pub layers: Vec<(Mat, Vec<f64>)>,
    pub lora: Option<Vec<(Mat, Mat)>>,
    pub domain: Option<Vec<f64>>,
}

/// He-style initialization scaled by fan-in.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ModelParams, ModelError> {
    spec.validate()?;
    let mut rng = seeding::rng_for(seed, &["init"]);
    let mut layers = Vec::new();
    for (fan_in, fan_out) in spec.layer_dims() {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut w = Mat::zeros(fan_in, fan_out);
        for v in &mut w.data {
            *v = std * seeding::sample_normal(&mut rng);
        }
        layers.push(Linear {
            w,
            b: vec![0.0; fan_out],
        });
    }
    Ok(ModelParams {
        layers,
        lora: None,
        domain_embedding: None,
        dropout_seed: seeding::derive_seed(seed, &["dropout"]),
    })
}

struct ForwardCache {
    /// Input to each linear layer (the augmented input for layer 0).
    layer_inputs: Vec<Mat>,
    /// Post-dropout, pre-ReLU activations per non-final layer.
    pre_relu: Vec<Mat>,
    /// Scaled dropout mask for the dropout layer (train mode only).
    dropout_mask: Option<Mat>,
    /// X·A per layer when low-rank deltas are attached.
    lora_mid: Vec<Option<Mat>>,
    logits: Mat,
    probs: Mat,
}

fn augmented_input(params: &ModelParams, spec: &MlpSpec, x: &Mat) -> Result<Mat, ModelError> {
    let want = params.expected_feature_width(spec);
    if x.cols != want {
        return Err(ModelError::Shape {
            want,
            got: x.cols,
        });
    }
    match &params.domain_embedding {
        None => Ok(x.clone()),
        Some(emb) => {
            if emb.vector.len() != DOMAIN_EMBED_DIM {
                return Err(ModelError::Shape {
                    want: DOMAIN_EMBED_DIM,
                    got: emb.vector.len(),
                });
            }
            let mut aug = Mat::zeros(x.rows, spec.input_dim);
            for n in 0..x.rows {
                let row = aug.row_mut(n);
                row[..x.cols].copy_from_slice(x.row(n));
                row[x.cols..].copy_from_slice(&emb.vector);
            }
            Ok(aug)
        }
    }
}

fn forward_cached(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &Mat,
    mode: Mode,
    dropout_step: u64,
) -> Result<ForwardCache, ModelError> {
    spec.validate()?;
    let input = augmented_input(params, spec, x)?;
    let n = input.rows;
    let n_layers = params.layers.len();
    let dropout_at = spec.dropout_layer();

    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut pre_relu = Vec::with_capacity(n_layers - 1);
    let mut lora_mid = vec![None; n_layers];
    let mut dropout_mask = None;
    let mut a = input;

    for (i, layer) in params.layers.iter().enumerate() {
        let w = &layer.w;
        let mut h = Mat::zeros(n, w.cols);
        for r in 0..n {
            let out = h.row_mut(r);
            out.copy_from_slice(&layer.b);
            accumulate_row(a.row(r), w, out);
        }
        if let Some(lora) = &params.lora {
            let mid = matmul(&a, &lora[i].a);
            for r in 0..n {
                accumulate_row(mid.row(r), &lora[i].b, h.row_mut(r));
            }
            lora_mid[i] = Some(mid);
        }
        if !h.all_finite() {
            return Err(ModelError::Numeric { layer: i });
        }
        layer_inputs.push(a);
        if i + 1 == n_layers {
            // Final linear: softmax with max subtraction.
            let mut probs = Mat::zeros(n, 2);
            for r in 0..n {
                let l = h.row(r);
                let m = l[0].max(l[1]);
                let e0 = (l[0] - m).exp();
                let e1 = (l[1] - m).exp();
                let z = e0 + e1;
                probs.row_mut(r)[0] = e0 / z;
                probs.row_mut(r)[1] = e1 / z;
            }
            return Ok(ForwardCache {
                layer_inputs,
                pre_relu,
                dropout_mask,
                lora_mid,
                logits: h,
                probs,
            });
        }
        if i == dropout_at && mode == Mode::Train && spec.dropout_ratio > 0.0 {
            // Inverted dropout: scale kept units by 1/(1-p) at train time.
            let keep = 1.0 - spec.dropout_ratio;
            let mut rng = seeding::rng_for(
                params.dropout_seed,
                &["mask", &dropout_step.to_string()],
            );
            let mut mask = Mat::zeros(n, h.cols);
            for v in &mut mask.data {
                *v = if rand::Rng::random::<f64>(&mut rng) < keep {
                    1.0 / keep
                } else {
                    0.0
                };
            }
            for (hv, mv) in h.data.iter_mut().zip(&mask.data) {
                *hv *= mv;
            }
            dropout_mask = Some(mask);
        }
        pre_relu.push(h.clone());
        for v in &mut h.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        a = h;
    }
    unreachable!("layer chain always ends in the final linear");
}

/// Class probabilities for each input row.
pub fn forward(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &Mat,
    mode: Mode,
) -> Result<Mat, ModelError> {
    Ok(forward_cached(params, spec, x, mode, 0)?.probs)
}

/// Argmax labels from an eval-mode forward pass; ties break toward 0.
pub fn predict(spec: &MlpSpec, model: &ModelParams, x: &Mat) -> Result<Vec<u8>, ModelError> {
    let probs = forward(model, spec, x, Mode::Eval)?;
    Ok((0..probs.rows)
        .map(|r| u8::from(probs.row(r)[1] > probs.row(r)[0]))
        .collect())
}

fn per_sample_losses(cache: &ForwardCache, labels: &[u8]) -> Vec<f64> {
    (0..cache.logits.rows)
        .map(|r| {
            let l = cache.logits.row(r);
            let m = l[0].max(l[1]);
            let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
            lse - l[labels[r] as usize]
        })
        .collect()
}

/// Weighted cross-entropy loss and exact gradients for every parameter group.
/// `weights` must align with the batch; gradients flow through the weights as
/// fixed constants.
pub fn loss_and_grad_weighted(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &Mat,
    labels: &[u8],
    mode: Mode,
    weights: &[f64],
    dropout_step: u64,
) -> Result<(f64, Gradients), ModelError> {
    if x.rows == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if labels.len() != x.rows || weights.len() != x.rows {
        return Err(ModelError::Shape {
            want: x.rows,
            got: labels.len().min(weights.len()),
        });
    }
    let cache = forward_cached(params, spec, x, mode, dropout_step)?;
    let losses = per_sample_losses(&cache, labels);
    let loss: f64 = losses.iter().zip(weights).map(|(l, w)| l * w).sum();

    let n = x.rows;
    let n_layers = params.layers.len();
    let dropout_at = spec.dropout_layer();

    // d loss / d logits for softmax + CE, scaled by the sample weight.
    let mut delta = Mat::zeros(n, 2);
    for r in 0..n {
        let p = cache.probs.row(r);
        let y = labels[r] as usize;
        let row = delta.row_mut(r);
        row[0] = weights[r] * (p[0] - f64::from(y == 0));
        row[1] = weights[r] * (p[1] - f64::from(y == 1));
    }

    let mut layer_grads: Vec<(Mat, Vec<f64>)> = params
        .layers
        .iter()
        .map(|l| (Mat::zeros(l.w.rows, l.w.cols), vec![0.0; l.b.len()]))
        .collect();
    let mut lora_grads: Option<Vec<(Mat, Mat)>> = params.lora.as_ref().map(|deltas| {
        deltas
            .iter()
            .map(|d| {
                (
                    Mat::zeros(d.a.rows, d.a.cols),
                    Mat::zeros(d.b.rows, d.b.cols),
                )
            })
            .collect()
    });
    let mut domain_grad: Option<Vec<f64>> = None;

    for i in (0..n_layers).rev() {
        let a_in = &cache.layer_inputs[i];
        // Parameter gradients.
        accumulate_outer(a_in, &delta, &mut layer_grads[i].0);
        for r in 0..n {
            for (g, d) in layer_grads[i].1.iter_mut().zip(delta.row(r)) {
                *g += d;
            }
        }
        let mut delta_b: Option<Mat> = None;
        if let (Some(lora), Some(grads)) = (&params.lora, &mut lora_grads) {
            let mid = cache.lora_mid[i].as_ref().expect("lora mid cached");
            let db = matmul_transpose(&delta, &lora[i].b);
            accumulate_outer(mid, &delta, &mut grads[i].1);
            accumulate_outer(a_in, &db, &mut grads[i].0);
            delta_b = Some(db);
        }
        if i == 0 {
            if let Some(_emb) = &params.domain_embedding {
                {
                    // grad w.r.t. the shared embedding: the bottom rows of W
                    // applied to the batch-summed delta.
                    let w = &params.layers[0].w;
                    let mut dsum = vec![0.0; w.cols];
                    for r in 0..n {
                        for (s, d) in dsum.iter_mut().zip(delta.row(r)) {
                            *s += d;
                        }
                    }
                    let offset = spec.input_dim - DOMAIN_EMBED_DIM;
                    let mut de = vec![0.0; DOMAIN_EMBED_DIM];
                    for (k, dek) in de.iter_mut().enumerate() {
                        let wr = w.row(offset + k);
                        let mut acc = 0.0;
                        for (s, wv) in dsum.iter().zip(wr) {
                            acc += s * wv;
                        }
                        if let Some(lora) = &params.lora {
                            // Low-rank path also reaches the embedding slice.
                            let la = &lora[0].a;
                            let lb = &lora[0].b;
                            let ar = la.row(offset + k);
                            for (r_idx, av) in ar.iter().enumerate() {
                                let br = lb.row(r_idx);
                                let mut inner = 0.0;
                                for (s, bv) in dsum.iter().zip(br) {
                                    inner += s * bv;
                                }
                                acc += av * inner;
                            }
                        }
                        *dek = acc;
                    }
                    domain_grad = Some(de);
                }
            }
            break;
        }
        // Propagate to the previous activation, folding in the ReLU gate of
        // layer i-1: positions with nonpositive pre-activation contribute
        // nothing, so their dots are skipped outright.
        let pre = &cache.pre_relu[i - 1];
        let mut da = matmul_transpose_gated(&delta, &params.layers[i].w, pre);
        if let (Some(lora), Some(db)) = (&params.lora, &delta_b) {
            let add = matmul_transpose_gated(db, &lora[i].a, pre);
            for (x, y) in da.data.iter_mut().zip(&add.data) {
                *x += y;
            }
        }
        // Through dropout of layer i-1.
        if i - 1 == dropout_at {
            if let Some(mask) = &cache.dropout_mask {
                for (g, m) in da.data.iter_mut().zip(&mask.data) {
                    *g *= m;
                }
            }
        }
        delta = da;
    }

    Ok((
        loss,
        Gradients {
            layers: layer_grads,
            lora: lora_grads,
            domain: domain_grad,
        },
    ))
}

/// Mean cross-entropy and gradients (uniform weights).
pub fn loss_and_grad(
    params: &ModelParams,
    spec: &MlpSpec,
    x: &Mat,
    labels: &[u8],
    mode: Mode,
) -> Result<(f64, Gradients), ModelError> {
    let w = vec![1.0 / x.rows.max(1) as f64; x.rows];
    loss_and_grad_weighted(params, spec, x, labels, mode, &w, 0)
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    fn new(len: usize) -> AdamSlot {
        AdamSlot {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn update(&mut self, w: &mut [f64], g: &[f64], cfg: &TrainConfig, t: u64) {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for ((wi, gi), (mi, vi)) in w
            .iter_mut()
            .zip(g)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *wi -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }

    /// Row-masked variant for the first weight matrix. Rows whose input
    /// feature is zero in every training record receive a zero gradient at
    /// every step, so their moments and weights never move; skipping them is
    /// bitwise identical to the dense loop.
    fn update_rows(
        &mut self,
        w: &mut [f64],
        g: &[f64],
        cfg: &TrainConfig,
        t: u64,
        rows: &[usize],
        cols: usize,
    ) {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for &r in rows {
            let lo = r * cols;
            let hi = lo + cols;
            for (((wi, gi), mi), vi) in w[lo..hi]
                .iter_mut()
                .zip(&g[lo..hi])
                .zip(self.m[lo..hi].iter_mut())
                .zip(self.v[lo..hi].iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

struct AdamState {
    layers: Vec<(AdamSlot, AdamSlot)>,
    lora: Vec<(AdamSlot, AdamSlot)>,
    domain: Option<AdamSlot>,
    t: u64,
}

impl AdamState {
    fn new(params: &ModelParams, scope: TrainScope) -> AdamState {
        let layers = if scope.base {
            params
                .layers
                .iter()
                .map(|l| {
                    (
                        AdamSlot::new(l.w.data.len()),
                        AdamSlot::new(l.b.len()),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let lora = if scope.lora {
            params
                .lora
                .as_ref()
                .map(|deltas| {
                    deltas
                        .iter()
                        .map(|d| {
                            (
                                AdamSlot::new(d.a.data.len()),
                                AdamSlot::new(d.b.data.len()),
                            )
                        })
                        .collect()
                })
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        let domain = if scope.domain {
            params
                .domain_embedding
                .as_ref()
                .filter(|e| e.trainable)
                .map(|e| AdamSlot::new(e.vector.len()))
        } else {
            None
        };
        AdamState {
            layers,
            lora,
            domain,
            t: 0,
        }
    }

    fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &Gradients,
        cfg: &TrainConfig,
        scope: TrainScope,
        active_input_rows: Option<&[usize]>,
    ) {
        self.t += 1;
        if scope.base {
            for (i, (sw, sb)) in self.layers.iter_mut().enumerate() {
                match (i, active_input_rows) {
                    (0, Some(rows)) => {
                        let cols = params.layers[0].w.cols;
                        sw.update_rows(
                            &mut params.layers[0].w.data,
                            &grads.layers[0].0.data,
                            cfg,
                            self.t,
                            rows,
                            cols,
                        );
                    }
                    _ => sw.update(
                        &mut params.layers[i].w.data,
                        &grads.layers[i].0.data,
                        cfg,
                        self.t,
                    ),
                }
                sb.update(&mut params.layers[i].b, &grads.layers[i].1, cfg, self.t);
            }
        }
        if scope.lora {
            if let (Some(deltas), Some(lg)) = (&mut params.lora, &grads.lora) {
                for (i, (sa, sb)) in self.lora.iter_mut().enumerate() {
                    sa.update(&mut deltas[i].a.data, &lg[i].0.data, cfg, self.t);
                    sb.update(&mut deltas[i].b.data, &lg[i].1.data, cfg, self.t);
                }
            }
        }
        if let (Some(slot), Some(emb), Some(dg)) = (
            &mut self.domain,
            &mut params.domain_embedding,
            &grads.domain,
        ) {
            slot.update(&mut emb.vector, dg, cfg, self.t);
        }
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean (weighted) loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Input-matrix rows of the first weight matrix that can ever receive a
/// nonzero gradient: features that are nonzero somewhere in the data, plus
/// the domain-embedding slice when one is attached. Skipping the rest in the
/// optimizer is exact because zero gradients leave Adam moments at zero.
fn active_first_layer_rows(params: &ModelParams, spec: &MlpSpec, x: &Mat) -> Option<Vec<usize>> {
    let in_dim = spec.layer_dims()[0].0;
    let mut active = vec![false; in_dim];
    for r in 0..x.rows {
        for (k, &v) in x.row(r).iter().enumerate() {
            if v != 0.0 {
                active[k] = true;
            }
        }
    }
    if params.domain_embedding.is_some() {
        for slot in active.iter_mut().skip(spec.input_dim - DOMAIN_EMBED_DIM) {
            *slot = true;
        }
    }
    let rows: Vec<usize> = (0..in_dim).filter(|&k| active[k]).collect();
    // Row skipping only pays off when most of the matrix is untouched.
    if rows.len() * 2 < in_dim {
        Some(rows)
    } else {
        None
    }
}

/// Continue training the given parameters on (x, labels), snapshotting the
/// parameters at each epoch count in `marks` (ascending). Mini-batches are
/// reshuffled each epoch with the config seed; the last incomplete batch is
/// kept. With `transform` set, the per-sample losses of each batch pass
/// through it to produce backprop weights (the CVaR head plugs in here).
///
/// A snapshot at mark e equals the result of a full run with epochs = e and
/// the same seed, because the shuffle stream is consumed sequentially.
pub fn train_with_snapshots(
    mut params: ModelParams,
    spec: &MlpSpec,
    x: &Mat,
    labels: &[u8],
    cfg: &TrainConfig,
    scope: TrainScope,
    transform: Option<LossTransform>,
    marks: &[usize],
) -> Result<(Vec<(usize, ModelParams)>, Vec<f64>), ModelError> {
    spec.validate()?;
    if x.rows == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if labels.len() != x.rows {
        return Err(ModelError::Shape {
            want: x.rows,
            got: labels.len(),
        });
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::BadSpec("batch_size must be >= 1".into()));
    }
    if marks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ModelError::BadSpec("snapshot marks must be ascending".into()));
    }
    let total_epochs = marks.last().copied().unwrap_or(0);
    let active_rows = if scope.base {
        active_first_layer_rows(&params, spec, x)
    } else {
        None
    };
    let mut snapshots = Vec::with_capacity(marks.len());
    if marks.first() == Some(&0) {
        snapshots.push((0, params.clone()));
    }
    let mut state = AdamState::new(&params, scope);
    let mut epoch_losses = Vec::with_capacity(total_epochs);
    let mut shuffle_rng = seeding::rng_for(cfg.seed, &["shuffle"]);
    let mut batch_x = Mat::zeros(cfg.batch_size.min(x.rows), x.cols);
    for epoch in 0..total_epochs {
        let order = seeding::shuffled_indices(&mut shuffle_rng, x.rows);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bn = chunk.len();
            if batch_x.rows != bn {
                batch_x = Mat::zeros(bn, x.cols);
            }
            let mut batch_y = Vec::with_capacity(bn);
            for (r, &src) in chunk.iter().enumerate() {
                batch_x.row_mut(r).copy_from_slice(x.row(src));
                batch_y.push(labels[src]);
            }
            let step = state.t + 1;
            let uniform = vec![1.0 / bn as f64; bn];
            let weights = match transform {
                None => uniform,
                Some(f) => {
                    // One extra forward to get per-sample losses for the
                    // scalarization; the weighted pass reuses the same mask
                    // because the step index is shared.
                    let cache = forward_cached(&params, spec, &batch_x, Mode::Train, step)?;
                    let losses = per_sample_losses(&cache, &batch_y);
                    f(&losses)
                }
            };
            let (loss, grads) = loss_and_grad_weighted(
                &params,
                spec,
                &batch_x,
                &batch_y,
                Mode::Train,
                &weights,
                step,
            )?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            state.step(&mut params, &grads, cfg, scope, active_rows.as_deref());
            epoch_loss += loss;
            batches += 1.0;
        }
        epoch_losses.push(epoch_loss / batches);
        if marks.contains(&(epoch + 1)) {
            snapshots.push((epoch + 1, params.clone()));
        }
    }
    if marks.is_empty() {
        snapshots.push((0, params));
    }
    Ok((snapshots, epoch_losses))
}

/// Continue training for `cfg.epochs` epochs; see `train_with_snapshots`.
pub fn train_from(
    params: ModelParams,
    spec: &MlpSpec,
    x: &Mat,
    labels: &[u8],
    cfg: &TrainConfig,
    scope: TrainScope,
    transform: Option<LossTransform>,
) -> Result<TrainOutcome, ModelError> {
    let marks = [cfg.epochs];
    let (mut snapshots, epoch_losses) = train_with_snapshots(
        params,
        spec,
        x,
        labels,
        cfg,
        scope,
        transform,
        if cfg.epochs == 0 { &[] } else { &marks },
    )?;
    let (_, params) = snapshots.pop().expect("final snapshot always present");
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

/// Fresh training run: He init followed by `train_from` over all base
/// parameters (and the domain embedding when one is attached as trainable).
pub fn train(
    spec: &MlpSpec,
    x: &Mat,
    labels: &[u8],
    cfg: &TrainConfig,
    transform: Option<LossTransform>,
) -> Result<TrainOutcome, ModelError> {
    let params = init_params(spec, cfg.seed)?;
    train_from(
        params,
        spec,
        x,
        labels,
        cfg,
        TrainScope::base_and_domain(),
        transform,
    )
}
