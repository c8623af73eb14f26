//! Experiment orchestration: job planning, execution, the append-only event
//! log, resumability, and aggregation.
//!
//! The unit of work is a (pair, method, seed) job that trains the method's
//! grid on the source, selects on the balanced validation split, runs every
//! configured adaptation on the finetune split, and evaluates on the held-out
//! target test split. A separate (pair, seed) diagnostics job computes the
//! drop decomposition and bound inputs. Every completed job appends one line
//! to `events.jsonl`; a rerun skips jobs already present, so an interrupted
//! run resumes to the same result as an uninterrupted one.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{self, AdaptConfig, AdaptMethod};
use crate::datagen::{self, load_csv, sample_balanced, Dataset, DrawTracker, Schema, TabularEncoder};
use crate::embedder::{EmbedError, EmbeddingProvider, EmbeddingVector};
use crate::evaluator::{self, EvalRecord, FractionBestReport, SettingAggregate};
use crate::linalg::Mat;
use crate::neuralcore::{
    self, MlpSpec, ModelParams, TrainConfig, TrainScope,
};
use crate::robusttrain::{
    self, train_fdro_linear, train_linear, train_wdro_linear, LinearKind, LinearTrainConfig,
};
use crate::serializer::{
    serialize_incontext_block, DomainInfoDoc, DomainInfoSource, SerializationTemplate,
    SerializerConfig, TaskDescription,
};
use crate::shiftlab::{self, BoundInputs, ShiftDecomposition};

use super::config::{
    AdaptGridSpec, AdaptKind, DataSource, DomainInfoSpec, FeatureMode, MethodSpec, ModelFamily,
    PairSpec, RunConfig, TargetAllocation,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(#[from] super::config::ConfigError),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("run directory holds a different config (hash {found}, expected {expected})")]
    ConfigMismatch { found: String, expected: String },
    #[error("job {job} failed: {message}")]
    Job { job: String, message: String },
    #[error("aggregation error: {0}")]
    Aggregate(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Diagnostics computed once per (pair, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub source_id: String,
    pub target_id: String,
    pub seed: u64,
    pub decomposition: ShiftDecomposition,
    pub hdh: f64,
    pub joint_err: f64,
    pub bound: f64,
}

/// One line of the append-only event log.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EventRow {
    job: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    records: Option<Vec<EvalRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diagnostics: Option<PairDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub grid_subsample_cap: usize,
    pub completed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub records: Vec<EvalRecord>,
    pub diagnostics: Vec<PairDiagnostics>,
    pub overall_means: BTreeMap<String, f64>,
    pub fraction_best: FractionBestReport,
    /// k → method → mean target Macro F1 over the worst-k settings.
    pub worst_k_tables: BTreeMap<usize, BTreeMap<String, f64>>,
    pub setting_aggregates: Vec<SettingAggregate>,
    pub errors: Vec<(String, String)>,
    pub manifest: Manifest,
}

/// Everything one (pair, seed) job needs: the record splits.
struct PairData {
    source_train: Dataset,
    source_test: Dataset,
    target_test: Dataset,
    target_val: Dataset,
    target_ft: Option<Dataset>,
}

const TARGET_POOL_EXTRA: usize = 256;

fn prepare_pair(cfg: &RunConfig, pair: &PairSpec, seed: u64) -> Result<PairData, String> {
    let budgets = &cfg.budgets;
    let (val_budget, ft_budget) = match budgets.allocation {
        TargetAllocation::Split32_32 => (budgets.n_val, Some(budgets.n_finetune)),
        TargetAllocation::ValOnly64 => (budgets.n_val + budgets.n_finetune, None),
    };
    let (source_full, target_full) = match &cfg.data {
        DataSource::Synthetic { .. } => {
            let spec = cfg
                .shift_spec_for(pair, seed)
                .expect("synthetic data source");
            let (s, t) = datagen::generate_pair(
                &spec,
                &pair.source_id,
                &pair.target_id,
                budgets.n_train + budgets.n_test,
                budgets.n_test + TARGET_POOL_EXTRA,
            )
            .map_err(|e| e.to_string())?;
            (s, t)
        }
        DataSource::Csv { schema_file, .. } => {
            let text = std::fs::read_to_string(schema_file)
                .map_err(|e| format!("{}: {e}", schema_file.display()))?;
            let schema: Schema = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            schema.validate().map_err(|e| e.to_string())?;
            let src_path = pair.source_csv.as_ref().expect("validated csv pair");
            let tgt_path = pair.target_csv.as_ref().expect("validated csv pair");
            let s = load_csv(src_path, &schema, &pair.source_id).map_err(|e| e.to_string())?;
            let t = load_csv(tgt_path, &schema, &pair.target_id).map_err(|e| e.to_string())?;
            // Seeded shuffle so every replicate draws fresh splits.
            let shuffle = |d: &Dataset, label: &str| -> Dataset {
                let mut rng = crate::seeding::rng_for(
                    seed,
                    &["csv-shuffle", &pair.label(), label],
                );
                let order = crate::seeding::shuffled_indices(&mut rng, d.len());
                d.subset(&order)
            };
            let _ = &schema;
            (shuffle(&s, "source"), shuffle(&t, "target"))
        }
    };
    if source_full.len() < budgets.n_train + budgets.n_test {
        return Err(format!(
            "source {} has {} records, need {}",
            pair.source_id,
            source_full.len(),
            budgets.n_train + budgets.n_test
        ));
    }
    if target_full.len() < budgets.n_test + val_budget + ft_budget.unwrap_or(0) {
        return Err(format!("target {} too small", pair.target_id));
    }
    let idx: Vec<usize> = (0..budgets.n_train).collect();
    let source_train = source_full.subset(&idx);
    let idx: Vec<usize> = (budgets.n_train..budgets.n_train + budgets.n_test).collect();
    let source_test = source_full.subset(&idx);

    let idx: Vec<usize> = (0..budgets.n_test).collect();
    let target_test = target_full.subset(&idx);
    let mut tracker = DrawTracker::new();
    for r in &target_test.records {
        tracker.mark(r.record_id);
    }
    let val_seed = crate::seeding::derive_seed(seed, &["val-draw", &pair.label()]);
    let target_val = sample_balanced(&target_full, val_budget, val_seed, &mut tracker)
        .map_err(|e| e.to_string())?;
    let target_ft = match ft_budget {
        None => None,
        Some(n) => {
            let ft_seed = crate::seeding::derive_seed(seed, &["ft-draw", &pair.label()]);
            Some(
                sample_balanced(&target_full, n, ft_seed, &mut tracker)
                    .map_err(|e| e.to_string())?,
            )
        }
    };
    // Isolation invariant: validation, finetuning, and test sets are
    // pairwise disjoint within every job.
    let ids = |d: &Dataset| -> BTreeSet<u64> { d.records.iter().map(|r| r.record_id).collect() };
    let test_ids = ids(&target_test);
    let val_ids = ids(&target_val);
    assert!(test_ids.is_disjoint(&val_ids), "test/val overlap");
    if let Some(ft) = &target_ft {
        let ft_ids = ids(ft);
        assert!(test_ids.is_disjoint(&ft_ids), "test/finetune overlap");
        assert!(val_ids.is_disjoint(&ft_ids), "val/finetune overlap");
    }
    Ok(PairData {
        source_train,
        source_test,
        target_test,
        target_val,
        target_ft,
    })
}

fn serializer_parts(
    cfg: &RunConfig,
) -> Result<(SerializationTemplate, TaskDescription), String> {
    if let DataSource::Csv {
        serializer_file: Some(path),
        ..
    } = &cfg.data
    {
        let sc = SerializerConfig::load(path).map_err(|e| e.to_string())?;
        let task = TaskDescription::new(&sc.task).map_err(|e| e.to_string())?;
        return Ok((sc.template, task));
    }
    let task = TaskDescription::new(&cfg.task).map_err(|e| e.to_string())?;
    Ok((cfg.template.clone(), task))
}

fn to_mat(vectors: &[EmbeddingVector]) -> Mat {
    let rows: Vec<Vec<f64>> = vectors.iter().map(|v| v.to_f64()).collect();
    Mat::from_rows(&rows)
}

/// Model inputs for one method on one pair.
struct Prepared {
    train: Mat,
    val: Mat,
    ft: Option<Mat>,
    test: Mat,
    /// Domain-information embeddings (llm_domain mode only).
    source_doc: Option<EmbeddingVector>,
    target_doc: Option<EmbeddingVector>,
}

fn domain_doc(
    spec: &DomainInfoSpec,
    dataset: &Dataset,
    n_samples: usize,
    template: &SerializationTemplate,
    seed: u64,
) -> Result<DomainInfoDoc, String> {
    match spec {
        DomainInfoSpec::TargetSamples => {
            let mut tracker = DrawTracker::new();
            let n = n_samples.min(dataset.len()) & !1;
            let block = sample_balanced(dataset, n.max(2), seed, &mut tracker)
                .map_err(|e| e.to_string())?;
            serialize_incontext_block(&block.records, &dataset.schema, template)
                .map_err(|e| e.to_string())
        }
        DomainInfoSpec::Files { dir } => {
            let path = dir.join(format!("{}.txt", dataset.domain_id));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            if text.trim().is_empty() {
                return Err(format!("{}: empty domain text", path.display()));
            }
            Ok(DomainInfoDoc {
                domain_id: dataset.domain_id.clone(),
                source_kind: DomainInfoSource::Wiki,
                text,
            })
        }
    }
}

fn prepare_features(
    cfg: &RunConfig,
    method: &MethodSpec,
    data: &PairData,
    provider: &EmbeddingProvider,
    seed: u64,
) -> Result<Prepared, String> {
    let (template, task) = serializer_parts(cfg)?;
    match method.features {
        FeatureMode::Tabular => {
            let encoder = TabularEncoder::fit(&data.source_train).map_err(|e| e.to_string())?;
            Ok(Prepared {
                train: Mat::from_rows(&encoder.transform(&data.source_train)),
                val: Mat::from_rows(&encoder.transform(&data.target_val)),
                ft: data
                    .target_ft
                    .as_ref()
                    .map(|d| Mat::from_rows(&encoder.transform(d))),
                test: Mat::from_rows(&encoder.transform(&data.target_test)),
                source_doc: None,
                target_doc: None,
            })
        }
        FeatureMode::Llm | FeatureMode::LlmDomain => {
            let embed = |d: &Dataset| -> Result<Mat, String> {
                provider
                    .embed_dataset(d, &template, &task)
                    .map(|vs| to_mat(&vs))
                    .map_err(|e: EmbedError| e.to_string())
            };
            let train = embed(&data.source_train)?;
            let val = embed(&data.target_val)?;
            let ft = data.target_ft.as_ref().map(|d| embed(d)).transpose()?;
            let test = embed(&data.target_test)?;
            let (source_doc, target_doc) = if method.features == FeatureMode::LlmDomain {
                let info = method.domain_info.as_ref().expect("validated");
                let src_doc_seed =
                    crate::seeding::derive_seed(seed, &["src-doc", &data.source_train.domain_id]);
                let src = domain_doc(info, &data.source_train, 32, &template, src_doc_seed)?;
                // The target-side block comes from the labeled target samples
                // we hold: the finetune split, or the validation split when
                // the allocation gives everything to validation.
                let target_labeled = data.target_ft.as_ref().unwrap_or(&data.target_val);
                let tgt_doc_seed =
                    crate::seeding::derive_seed(seed, &["tgt-doc", &target_labeled.domain_id]);
                let tgt = match info {
                    DomainInfoSpec::TargetSamples => DomainInfoSpec::TargetSamples,
                    DomainInfoSpec::Files { dir } => DomainInfoSpec::Files { dir: dir.clone() },
                };
                let tgt = domain_doc(&tgt, target_labeled, 32, &template, tgt_doc_seed)?;
                let src_emb = provider
                    .embed_domain_doc(&src, &task)
                    .map_err(|e| e.to_string())?;
                let tgt_emb = provider
                    .embed_domain_doc(&tgt, &task)
                    .map_err(|e| e.to_string())?;
                (Some(src_emb), Some(tgt_emb))
            } else {
                (None, None)
            };
            Ok(Prepared {
                train,
                val,
                ft,
                test,
                source_doc,
                target_doc,
            })
        }
    }
}

enum TrainedModel {
    Nn { spec: MlpSpec, params: ModelParams },
    Linear(robusttrain::LinearModel),
}

impl TrainedModel {
    fn predict(&self, x: &Mat) -> Result<Vec<u8>, String> {
        match self {
            TrainedModel::Nn { spec, params } => {
                neuralcore::predict(spec, params, x).map_err(|e| e.to_string())
            }
            TrainedModel::Linear(m) => Ok(m.predict_all(x)),
        }
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

/// Enumerate, optionally subsample, and train the method's source grid.
/// Returns (config_id, model) candidates in grid order.
fn train_source_candidates(
    cfg: &RunConfig,
    method: &MethodSpec,
    prepared: &Prepared,
    labels: &[u8],
    trainable_domain: bool,
    job_seed: u64,
) -> Result<Vec<(String, TrainedModel)>, String> {
    let llm_kind = method.features != FeatureMode::Tabular;
    let input_dim = prepared.train.cols + if prepared.source_doc.is_some() { 4096 } else { 0 };
    let mk_spec = |hidden: usize, dropout: f64| -> MlpSpec {
        match (llm_kind, prepared.source_doc.is_some()) {
            (false, _) => MlpSpec::tabular(input_dim, hidden, dropout),
            (true, false) => MlpSpec::llm4096(hidden, dropout),
            (true, true) => MlpSpec::llm8192(hidden, dropout),
        }
    };
    // Descriptor list in deterministic grid order.
    struct NnCase {
        alpha: Option<f64>,
        lr: f64,
        hidden: usize,
        dropout: f64,
    }
    let run_nn_cases = |cases: &[NnCase], epochs: &[usize]| -> Result<Vec<(String, TrainedModel)>, String> {
        let mut out = Vec::new();
        for case in cases {
            let spec = mk_spec(case.hidden, case.dropout);
            let tc = TrainConfig {
                batch_size: 128,
                ..TrainConfig::new(case.lr, *epochs.last().expect("nonempty epochs"), job_seed)
            };
            let mut init =
                neuralcore::init_params(&spec, tc.seed).map_err(|e| e.to_string())?;
            if let Some(doc) = &prepared.source_doc {
                init.domain_embedding = Some(neuralcore::DomainEmbedding {
                    vector: doc.to_f64(),
                    domain_id: String::new(),
                    trainable: trainable_domain,
                });
            }
            let head_alpha = case.alpha;
            let head = head_alpha.map(|a| {
                move |losses: &[f64]| -> Vec<f64> {
                    robusttrain::cvar_weights(losses, a).expect("finite batch losses")
                }
            });
            let transform: Option<neuralcore::LossTransform> = match &head {
                Some(h) => Some(h),
                None => None,
            };
            let (snapshots, _) = neuralcore::train_with_snapshots(
                init,
                &spec,
                &prepared.train,
                labels,
                &tc,
                TrainScope::base_and_domain(),
                transform,
                epochs,
            )
            .map_err(|e| e.to_string())?;
            for (epoch, params) in snapshots {
                let alpha_part = case
                    .alpha
                    .map(|a| format!("alpha={},", fmt_f(a)))
                    .unwrap_or_default();
                out.push((
                    format!(
                        "{}lr={},h={},do={},ep={}",
                        alpha_part,
                        fmt_f(case.lr),
                        case.hidden,
                        fmt_f(case.dropout),
                        epoch
                    ),
                    TrainedModel::Nn {
                        spec: spec.clone(),
                        params,
                    },
                ));
            }
        }
        Ok(out)
    };

    // Build the flat descriptor list first so oversized grids can be
    // subsampled before any training happens.
    match &method.model {
        ModelFamily::Nn { grid } | ModelFamily::CvarNn { grid, .. } => {
            let alphas: Vec<Option<f64>> = match &method.model {
                ModelFamily::CvarNn { alphas, .. } => alphas.iter().map(|&a| Some(a)).collect(),
                _ => vec![None],
            };
            let mut cases = Vec::new();
            for alpha in &alphas {
                for &lr in &grid.learning_rates {
                    for &hidden in &grid.hidden_dims {
                        for &dropout in &grid.dropout_ratios {
                            cases.push(NnCase {
                                alpha: *alpha,
                                lr,
                                hidden,
                                dropout,
                            });
                        }
                    }
                }
            }
            let total = cases.len() * grid.epochs.len();
            if total > cfg.grid_cap {
                // Subsample whole configurations (a configuration = one
                // case × one epoch mark); a case survives with the epoch
                // marks that were drawn.
                let keep = evaluator::grid_subsample(
                    total,
                    cfg.grid_cap,
                    crate::seeding::derive_seed(job_seed, &["grid-subsample"]),
                );
                let keep: BTreeSet<usize> = keep.into_iter().collect();
                let mut out = Vec::new();
                for (ci, case) in cases.iter().enumerate() {
                    let marks: Vec<usize> = grid
                        .epochs
                        .iter()
                        .enumerate()
                        .filter(|(ei, _)| keep.contains(&(ci * grid.epochs.len() + ei)))
                        .map(|(_, &e)| e)
                        .collect();
                    if !marks.is_empty() {
                        out.extend(run_nn_cases(std::slice::from_ref(case), &marks)?);
                    }
                }
                Ok(out)
            } else {
                run_nn_cases(&cases, &grid.epochs)
            }
        }
        ModelFamily::Logreg { regs } => {
            let mut out = Vec::new();
            for &reg in regs {
                let m = train_linear(
                    LinearKind::Logreg,
                    &prepared.train,
                    labels,
                    reg,
                    &LinearTrainConfig::default(),
                )
                .map_err(|e| e.to_string())?;
                out.push((format!("reg={}", fmt_f(reg)), TrainedModel::Linear(m)));
            }
            Ok(out)
        }
        ModelFamily::SvmSqhinge { regs } => {
            let mut out = Vec::new();
            for &reg in regs {
                let m = train_linear(
                    LinearKind::SvmSqhinge,
                    &prepared.train,
                    labels,
                    reg,
                    &LinearTrainConfig::default(),
                )
                .map_err(|e| e.to_string())?;
                out.push((format!("reg={}", fmt_f(reg)), TrainedModel::Linear(m)));
            }
            Ok(out)
        }
        ModelFamily::FdroLinear { divergence, radii } => {
            let mut out = Vec::new();
            for &eps in radii {
                let m = train_fdro_linear(
                    *divergence,
                    &prepared.train,
                    labels,
                    eps,
                    &LinearTrainConfig::default(),
                )
                .map_err(|e| e.to_string())?;
                out.push((format!("eps={}", fmt_f(eps)), TrainedModel::Linear(m)));
            }
            Ok(out)
        }
        ModelFamily::WdroLinear { radii } => {
            let mut out = Vec::new();
            for &eps in radii {
                let m = train_wdro_linear(
                    &prepared.train,
                    labels,
                    eps,
                    &LinearTrainConfig::default(),
                )
                .map_err(|e| e.to_string())?;
                out.push((format!("eps={}", fmt_f(eps)), TrainedModel::Linear(m)));
            }
            Ok(out)
        }
    }
}

struct StageScore {
    config_id: String,
    val_f1: f64,
}

fn select_best(
    candidates: &[(String, TrainedModel)],
    val: &Mat,
    val_labels: &[u8],
) -> Result<(usize, StageScore), String> {
    let mut scores = Vec::with_capacity(candidates.len());
    for (_, model) in candidates {
        let preds = model.predict(val)?;
        scores.push(evaluator::macro_f1(&preds, val_labels).map_err(|e| e.to_string())?);
    }
    // Candidates were already capped during grid enumeration.
    let (best, _) = evaluator::select_hyperparams(&scores, usize::MAX, 0)
        .map_err(|e| e.to_string())?;
    Ok((
        best,
        StageScore {
            config_id: candidates[best].0.clone(),
            val_f1: scores[best],
        },
    ))
}

/// Chosen adaptation outcome: config id, validation score, adapted params,
/// and the underlying grid point.
struct AdaptOutcome {
    config_id: String,
    val_f1: f64,
    params: ModelParams,
    learning_rate: f64,
    epochs: usize,
}

/// Run every adaptation variant of a method job; returns the grid winner.
#[allow(clippy::too_many_arguments)]
fn run_adaptation(
    adapt: &AdaptGridSpec,
    base_spec: &MlpSpec,
    base_params: &ModelParams,
    prepared: &Prepared,
    ft_labels: Option<&Vec<u8>>,
    val: &Mat,
    val_labels: &[u8],
    job_seed: u64,
) -> Result<Option<AdaptOutcome>, String> {
    let adapt_seed = crate::seeding::derive_seed(job_seed, &["adapt", &adapt.id]);
    match adapt.kind {
        AdaptKind::IncontextSwap => {
            let doc = prepared
                .target_doc
                .as_ref()
                .expect("llm_domain features provide a target doc");
            let swapped = adaptation::incontext_swap(base_params, base_spec, doc, "target")
                .map_err(|e| e.to_string())?;
            let preds = neuralcore::predict(base_spec, &swapped, val).map_err(|e| e.to_string())?;
            let val_f1 = evaluator::macro_f1(&preds, val_labels).map_err(|e| e.to_string())?;
            Ok(Some(AdaptOutcome {
                config_id: "swap".to_string(),
                val_f1,
                params: swapped,
                learning_rate: 0.0,
                epochs: 0,
            }))
        }
        AdaptKind::FullFinetune | AdaptKind::Lora | AdaptKind::Prefix => {
            let (Some(ft_x), Some(ft_y)) = (prepared.ft.as_ref(), ft_labels) else {
                // Validation-only allocation: finetuning methods degenerate
                // to the unadapted model and are skipped.
                return Ok(None);
            };
            let mut best: Option<AdaptOutcome> = None;
            for &lr in &adapt.learning_rates {
                for &epochs in &adapt.epochs {
                    let acfg = AdaptConfig {
                        method: match adapt.kind {
                            AdaptKind::FullFinetune => AdaptMethod::FullFinetune,
                            AdaptKind::Lora => AdaptMethod::Lora,
                            AdaptKind::Prefix => AdaptMethod::Prefix,
                            AdaptKind::IncontextSwap => unreachable!(),
                        },
                        learning_rate: lr,
                        epochs,
                        seed: adapt_seed,
                    };
                    let adapted = match adapt.kind {
                        AdaptKind::FullFinetune => {
                            adaptation::finetune_full(base_params, base_spec, ft_x, ft_y, &acfg)
                                .map_err(|e| e.to_string())?
                        }
                        AdaptKind::Lora => {
                            let attached = adaptation::attach_lora(base_params, adapt_seed)
                                .map_err(|e| e.to_string())?;
                            let tuned =
                                adaptation::finetune_lora(&attached, base_spec, ft_x, ft_y, &acfg)
                                    .map_err(|e| e.to_string())?;
                            debug_assert!(tuned
                                .layers
                                .iter()
                                .zip(&attached.layers)
                                .all(|(a, b)| a.w.data == b.w.data));
                            tuned
                        }
                        AdaptKind::Prefix => {
                            let doc = prepared
                                .target_doc
                                .as_ref()
                                .expect("llm_domain features provide a target doc");
                            let (tuned, _) = adaptation::prefix_tune(
                                base_params,
                                base_spec,
                                doc,
                                "target",
                                ft_x,
                                ft_y,
                                &acfg,
                            )
                            .map_err(|e| e.to_string())?;
                            tuned
                        }
                        AdaptKind::IncontextSwap => unreachable!(),
                    };
                    let preds = neuralcore::predict(base_spec, &adapted, val)
                        .map_err(|e| e.to_string())?;
                    let val_f1 =
                        evaluator::macro_f1(&preds, val_labels).map_err(|e| e.to_string())?;
                    let config_id = format!("lr={},ep={}", fmt_f(lr), epochs);
                    let better = match &best {
                        None => true,
                        Some(b) => val_f1 > b.val_f1,
                    };
                    if better {
                        best = Some(AdaptOutcome {
                            config_id,
                            val_f1,
                            params: adapted,
                            learning_rate: lr,
                            epochs,
                        });
                    }
                }
            }
            Ok(best)
        }
    }
}

fn method_job(
    cfg: &RunConfig,
    pair: &PairSpec,
    method: &MethodSpec,
    seed: u64,
    provider: &EmbeddingProvider,
) -> Result<Vec<EvalRecord>, String> {
    let started = Instant::now();
    let data = prepare_pair(cfg, pair, seed)?;
    let prepared = prepare_features(cfg, method, &data, provider, seed)?;
    let train_labels = data.source_train.labels();
    let val_labels = data.target_val.labels();
    let test_labels = data.target_test.labels();
    let ft_labels = data.target_ft.as_ref().map(|d| d.labels());

    let trainable_domain = method
        .adaptations
        .iter()
        .any(|a| a.kind == AdaptKind::Prefix);
    let job_seed = crate::seeding::derive_seed(seed, &["job", &pair.label(), &method.id]);
    let candidates = train_source_candidates(
        cfg,
        method,
        &prepared,
        &train_labels,
        trainable_domain,
        job_seed,
    )?;
    let (best_idx, stage) = select_best(&candidates, &prepared.val, &val_labels)?;
    let (_, best_model) = &candidates[best_idx];

    // For domain-aware models, any evaluation on target data carries the
    // target's domain-information embedding in the slot.
    let eval_model: TrainedModel = match (best_model, &prepared.target_doc) {
        (TrainedModel::Nn { spec, params }, Some(doc)) => {
            let swapped = adaptation::incontext_swap(params, spec, doc, "target")
                .map_err(|e| e.to_string())?;
            TrainedModel::Nn {
                spec: spec.clone(),
                params: swapped,
            }
        }
        _ => match best_model {
            TrainedModel::Nn { spec, params } => TrainedModel::Nn {
                spec: spec.clone(),
                params: params.clone(),
            },
            TrainedModel::Linear(m) => TrainedModel::Linear(m.clone()),
        },
    };
    let test_preds = eval_model.predict(&prepared.test)?;
    let test_f1 = evaluator::macro_f1(&test_preds, &test_labels).map_err(|e| e.to_string())?;
    let mut records = vec![EvalRecord {
        source_id: pair.source_id.clone(),
        target_id: pair.target_id.clone(),
        method_id: method.id.clone(),
        config_id: stage.config_id.clone(),
        seed,
        macro_f1_val: stage.val_f1,
        macro_f1_target: test_f1,
        yx_term: 0.0,
        x_term: 0.0,
        wall_ms: started.elapsed().as_millis() as u64,
    }];

    if let TrainedModel::Nn { spec, params } = best_model {
        // Adaptations start from the target-doc model for domain-aware
        // methods (the in-context state is what a practitioner would tune).
        let adapt_base = match &eval_model {
            TrainedModel::Nn { params: p, .. } if prepared.target_doc.is_some() => p,
            _ => params,
        };
        for adapt in &method.adaptations {
            let stage_start = Instant::now();
            let outcome = run_adaptation(
                adapt,
                spec,
                adapt_base,
                &prepared,
                ft_labels.as_ref(),
                &prepared.val,
                &val_labels,
                job_seed,
            )?;
            let Some(best) = outcome else {
                continue;
            };
            let preds = neuralcore::predict(spec, &best.params, &prepared.test)
                .map_err(|e| e.to_string())?;
            let f1 = evaluator::macro_f1(&preds, &test_labels).map_err(|e| e.to_string())?;
            records.push(EvalRecord {
                source_id: pair.source_id.clone(),
                target_id: pair.target_id.clone(),
                method_id: format!("{}+{}", method.id, adapt.id),
                config_id: format!("{}|{}", stage.config_id, best.config_id),
                seed,
                macro_f1_val: best.val_f1,
                macro_f1_target: f1,
                yx_term: 0.0,
                x_term: 0.0,
                wall_ms: stage_start.elapsed().as_millis() as u64,
            });
        }
    }
    Ok(records)
}

fn diagnostics_job(
    cfg: &RunConfig,
    pair: &PairSpec,
    seed: u64,
) -> Result<PairDiagnostics, String> {
    let data = prepare_pair(cfg, pair, seed)?;
    let encoder = TabularEncoder::fit(&data.source_train).map_err(|e| e.to_string())?;
    let source_train_x = Mat::from_rows(&encoder.transform(&data.source_train));
    let source_test_x = Mat::from_rows(&encoder.transform(&data.source_test));
    let target_test_x = Mat::from_rows(&encoder.transform(&data.target_test));

    // Reference learner for the decomposition: L2 logistic regression on
    // the source training split.
    let reference = train_linear(
        LinearKind::Logreg,
        &source_train_x,
        &data.source_train.labels(),
        1e-2,
        &LinearTrainConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let zero_one = |xs: &Mat, ys: &[u8]| -> Vec<f64> {
        reference
            .predict_all(xs)
            .iter()
            .zip(ys)
            .map(|(p, y)| f64::from(p != y))
            .collect()
    };
    let src_losses = zero_one(&source_test_x, &data.source_test.labels());
    let tgt_losses = zero_one(&target_test_x, &data.target_test.labels());
    let decomposition = shiftlab::disde_decompose(
        &source_test_x,
        &src_losses,
        &target_test_x,
        &tgt_losses,
        "tabular_logreg_ref",
    )
    .map_err(|e| e.to_string())?;

    let hdh_seed = crate::seeding::derive_seed(seed, &["hdh", &pair.label()]);
    let hdh = shiftlab::hdh_proxy(&source_test_x, &target_test_x, hdh_seed)
        .map_err(|e| e.to_string())?;
    let joint = shiftlab::joint_error(
        &source_test_x,
        &data.source_test.labels(),
        &target_test_x,
        &data.target_test.labels(),
    )
    .map_err(|e| e.to_string())?;

    let n_ft = cfg.budgets.n_finetune.max(1);
    let beta = n_ft as f64 / (cfg.budgets.n_train + n_ft) as f64;
    let bound = shiftlab::bound_value(&BoundInputs {
        alpha: beta,
        beta,
        m: cfg.budgets.n_train + n_ft,
        d: cfg.bound_capacity_d,
        delta: 0.05,
        hdh: hdh.clamp(0.0, 2.0),
        joint_err: joint.clamp(0.0, 2.0),
    })
    .map_err(|e| e.to_string())?;

    Ok(PairDiagnostics {
        source_id: pair.source_id.clone(),
        target_id: pair.target_id.clone(),
        seed,
        decomposition,
        hdh,
        joint_err: joint,
        bound,
    })
}

#[derive(Clone)]
enum JobKind<'a> {
    Method(&'a MethodSpec),
    Diagnostics,
}

fn job_key(pair: &PairSpec, seed: u64, kind: &JobKind) -> String {
    match kind {
        JobKind::Method(m) => format!("method={};pair={};seed={}", m.id, pair.label(), seed),
        JobKind::Diagnostics => format!("diag;pair={};seed={}", pair.label(), seed),
    }
}

fn read_event_log(path: &Path) -> Result<BTreeMap<String, EventRow>, RunError> {
    let mut out = BTreeMap::new();
    let text = match std::fs::read_to_string(path) {
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(path, e)),
        Ok(t) => t,
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line (crash mid-write) is skipped; its job reruns.
        if let Ok(row) = serde_json::from_str::<EventRow>(line) {
            out.entry(row.job.clone()).or_insert(row);
        }
    }
    Ok(out)
}

/// Execute a run configuration: plan jobs, skip ones already present in the
/// event log, execute the rest on a bounded worker pool, aggregate, and
/// write the result stream plus report tables.
pub fn run(cfg: &RunConfig) -> Result<RunReport, RunError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let manifest_path = cfg.out_dir.join("manifest.json");
    let config_hash = cfg.content_hash();
    if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let old: Manifest =
            serde_json::from_str(&text).map_err(|e| io_err(&manifest_path, e))?;
        if old.config_hash != config_hash {
            return Err(RunError::ConfigMismatch {
                found: old.config_hash,
                expected: config_hash,
            });
        }
    }
    let manifest = Manifest {
        config_hash: config_hash.clone(),
        schema_version: cfg.schema_version,
        seeds: cfg.seeds.clone(),
        grid_subsample_cap: cfg.grid_cap,
        completed: false,
    };
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| io_err(&manifest_path, e))?;
    cfg.save(&cfg.out_dir.join("config.json"))?;

    let provider = EmbeddingProvider::new(cfg.provider.clone())
        .map_err(|e| RunError::Aggregate(e.to_string()))?;

    // Plan jobs.
    let mut jobs: Vec<(&PairSpec, u64, JobKind)> = Vec::new();
    for pair in &cfg.pairs {
        for &seed in &cfg.seeds {
            jobs.push((pair, seed, JobKind::Diagnostics));
            for method in &cfg.methods {
                jobs.push((pair, seed, JobKind::Method(method)));
            }
        }
    }
    let log_path = cfg.out_dir.join("events.jsonl");
    let mut done = read_event_log(&log_path)?;
    let pending: Vec<&(&PairSpec, u64, JobKind)> = jobs
        .iter()
        .filter(|(p, s, k)| !done.contains_key(&job_key(p, *s, k)))
        .collect();

    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let writer = Mutex::new(std::io::BufWriter::new(log_file));

    let execute = |(pair, seed, kind): &&(&PairSpec, u64, JobKind)| -> EventRow {
        let key = job_key(pair, *seed, kind);
        let outcome = match kind {
            JobKind::Method(m) => method_job(cfg, pair, m, *seed, &provider).map(|records| {
                EventRow {
                    job: key.clone(),
                    records: Some(records),
                    diagnostics: None,
                    error: None,
                }
            }),
            JobKind::Diagnostics => diagnostics_job(cfg, pair, *seed).map(|diag| EventRow {
                job: key.clone(),
                records: None,
                diagnostics: Some(diag),
                error: None,
            }),
        };
        let row = outcome.unwrap_or_else(|message| EventRow {
            job: key.clone(),
            records: None,
            diagnostics: None,
            error: Some(message),
        });
        let line = serde_json::to_string(&row).expect("event serializes");
        {
            let mut w = writer.lock().expect("log writer lock");
            writeln!(w, "{line}").expect("event log write");
            w.flush().expect("event log flush");
        }
        row
    };

    let fresh_rows: Vec<EventRow> = if cfg.workers <= 1 {
        pending.iter().map(execute).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| RunError::Aggregate(e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            pending.par_iter().map(execute).collect()
        })
    };
    for row in fresh_rows {
        done.insert(row.job.clone(), row);
    }

    let report = aggregate(cfg, &done, manifest)?;
    write_outputs(cfg, &report)?;
    Ok(report)
}

fn aggregate(
    cfg: &RunConfig,
    events: &BTreeMap<String, EventRow>,
    mut manifest: Manifest,
) -> Result<RunReport, RunError> {
    let mut errors: Vec<(String, String)> = Vec::new();
    let mut diagnostics: Vec<PairDiagnostics> = Vec::new();
    let mut records: Vec<EvalRecord> = Vec::new();
    for row in events.values() {
        if let Some(e) = &row.error {
            errors.push((row.job.clone(), e.clone()));
        }
        if let Some(d) = &row.diagnostics {
            diagnostics.push(d.clone());
        }
        if let Some(rs) = &row.records {
            records.extend(rs.iter().cloned());
        }
    }
    // Attach decomposition terms to every record of the same (pair, seed).
    let mut terms: BTreeMap<(String, u64), (f64, f64)> = BTreeMap::new();
    for d in &diagnostics {
        terms.insert(
            (format!("{}->{}", d.source_id, d.target_id), d.seed),
            (d.decomposition.yx_term, d.decomposition.x_term),
        );
    }
    for r in &mut records {
        if let Some((yx, x)) = terms.get(&(r.setting(), r.seed)) {
            r.yx_term = *yx;
            r.x_term = *x;
        }
    }
    records.sort_by(|a, b| {
        (
            &a.source_id,
            &a.target_id,
            &a.method_id,
            a.seed,
            &a.config_id,
        )
            .cmp(&(&b.source_id, &b.target_id, &b.method_id, b.seed, &b.config_id))
    });
    diagnostics.sort_by(|a, b| {
        (&a.source_id, &a.target_id, a.seed).cmp(&(&b.source_id, &b.target_id, b.seed))
    });

    // Per-setting aggregates: mean over seeds per method; yx term averaged
    // over the setting's diagnostics.
    let mut by_setting: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in &records {
        by_setting
            .entry(r.setting())
            .or_default()
            .entry(r.method_id.clone())
            .or_default()
            .push(r.macro_f1_target);
    }
    let mut yx_by_setting: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for d in &diagnostics {
        yx_by_setting
            .entry(format!("{}->{}", d.source_id, d.target_id))
            .or_default()
            .push(d.decomposition.yx_term);
    }
    let expected_methods: BTreeSet<String> = records.iter().map(|r| r.method_id.clone()).collect();
    let mut setting_aggregates = Vec::new();
    let mut score_table: super::config::SettingScores = BTreeMap::new();
    for (setting, methods) in &by_setting {
        let complete = methods.len() == expected_methods.len()
            && methods.values().all(|v| v.len() == cfg.seeds.len());
        let yx = yx_by_setting
            .get(setting)
            .map(|v| v.iter().sum::<f64>() / v.len() as f64);
        if !complete || yx.is_none() {
            errors.push((
                format!("setting {setting}"),
                "incomplete records or missing diagnostics; excluded from aggregates".into(),
            ));
            continue;
        }
        let method_means: BTreeMap<String, f64> = methods
            .iter()
            .map(|(m, v)| (m.clone(), v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        let (source_id, target_id) = setting
            .split_once("->")
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .expect("setting label");
        score_table.insert(setting.clone(), method_means.clone());
        setting_aggregates.push(SettingAggregate {
            source_id,
            target_id,
            yx_term: yx.expect("checked above"),
            method_means,
        });
    }

    let fraction_best = if score_table.is_empty() {
        FractionBestReport {
            ratios: None,
            decisive_settings: 0,
            delta: cfg.fraction_best_delta,
        }
    } else {
        evaluator::fraction_best(&score_table, cfg.fraction_best_delta)
            .map_err(|e| RunError::Aggregate(e.to_string()))?
    };

    let mut overall_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &records {
        let e = overall_sums.entry(r.method_id.clone()).or_insert((0.0, 0));
        e.0 += r.macro_f1_target;
        e.1 += 1;
    }
    let overall_means: BTreeMap<String, f64> = overall_sums
        .into_iter()
        .map(|(m, (s, n))| (m, s / n as f64))
        .collect();

    let mut worst_k_tables = BTreeMap::new();
    for &k in &cfg.worst_k {
        if k == 0 || k > setting_aggregates.len() {
            continue;
        }
        let (_, means) = evaluator::worst_k(&setting_aggregates, k)
            .map_err(|e| RunError::Aggregate(e.to_string()))?;
        worst_k_tables.insert(k, means);
    }

    manifest.completed = true;
    Ok(RunReport {
        records,
        diagnostics,
        overall_means,
        fraction_best,
        worst_k_tables,
        setting_aggregates,
        errors,
        manifest,
    })
}

fn write_outputs(cfg: &RunConfig, report: &RunReport) -> Result<(), RunError> {
    let results_path = cfg.out_dir.join("results.jsonl");
    let mut body = String::new();
    for r in &report.records {
        body.push_str(&serde_json::to_string(r).expect("record serializes"));
        body.push('\n');
    }
    std::fs::write(&results_path, body).map_err(|e| io_err(&results_path, e))?;

    let manifest_path = cfg.out_dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&report.manifest).expect("manifest serializes"),
    )
    .map_err(|e| io_err(&manifest_path, e))?;

    super::report::write_report(&cfg.out_dir.join("report"), report)
        .map_err(|e| RunError::Aggregate(e.to_string()))?;
    Ok(())
}

/// Re-aggregate a run directory from its event log alone (the report CLI).
pub fn reaggregate(cfg: &RunConfig) -> Result<RunReport, RunError> {
    let log_path = cfg.out_dir.join("events.jsonl");
    if !log_path.exists() {
        return Err(RunError::Io {
            path: log_path.display().to_string(),
            message: "no event log; run `bench` first".into(),
        });
    }
    let events = read_event_log(&log_path)?;
    let manifest = Manifest {
        config_hash: cfg.content_hash(),
        schema_version: cfg.schema_version,
        seeds: cfg.seeds.clone(),
        grid_subsample_cap: cfg.grid_cap,
        completed: false,
    };
    let report = aggregate(cfg, &events, manifest)?;
    write_outputs(cfg, &report)?;
    Ok(report)
}

/// Outcome of the `train` CLI subcommand: the selected source model.
pub struct SingleTrainOutcome {
    pub spec: MlpSpec,
    pub params: ModelParams,
    pub val_f1: f64,
    pub config_id: String,
}

/// Outcome of the `adapt` CLI subcommand.
pub struct SingleAdaptOutcome {
    pub spec: MlpSpec,
    pub params: ModelParams,
    pub meta: crate::neuralcore::AdaptationMeta,
    pub val_f1: f64,
}

fn find_method<'a>(cfg: &'a RunConfig, method_id: &str) -> Result<&'a MethodSpec, RunError> {
    cfg.methods
        .iter()
        .find(|m| m.id == method_id)
        .ok_or_else(|| RunError::Aggregate(format!("no method {method_id:?} in config")))
}

fn find_pair(cfg: &RunConfig, idx: usize) -> Result<&PairSpec, RunError> {
    cfg.pairs
        .get(idx)
        .ok_or_else(|| RunError::Aggregate(format!("pair index {idx} out of range")))
}

/// Train one method's grid on one pair and return the selected model
/// (neural families only; linear baselines have no checkpoint format).
pub fn train_single(
    cfg: &RunConfig,
    pair_idx: usize,
    method_id: &str,
    seed: u64,
) -> Result<SingleTrainOutcome, RunError> {
    cfg.validate()?;
    let pair = find_pair(cfg, pair_idx)?;
    let method = find_method(cfg, method_id)?;
    let fail = |message: String| RunError::Job {
        job: format!("train {method_id} on {}", pair.label()),
        message,
    };
    let provider =
        EmbeddingProvider::new(cfg.provider.clone()).map_err(|e| fail(e.to_string()))?;
    let data = prepare_pair(cfg, pair, seed).map_err(fail)?;
    let prepared = prepare_features(cfg, method, &data, &provider, seed).map_err(fail)?;
    let trainable_domain = method
        .adaptations
        .iter()
        .any(|a| a.kind == AdaptKind::Prefix);
    let job_seed = crate::seeding::derive_seed(seed, &["job", &pair.label(), &method.id]);
    let candidates = train_source_candidates(
        cfg,
        method,
        &prepared,
        &data.source_train.labels(),
        trainable_domain,
        job_seed,
    )
    .map_err(fail)?;
    let (best_idx, stage) =
        select_best(&candidates, &prepared.val, &data.target_val.labels()).map_err(fail)?;
    match &candidates[best_idx].1 {
        TrainedModel::Nn { spec, params } => Ok(SingleTrainOutcome {
            spec: spec.clone(),
            params: params.clone(),
            val_f1: stage.val_f1,
            config_id: stage.config_id,
        }),
        TrainedModel::Linear(_) => Err(fail(
            "checkpointing applies to neural models; linear baselines live in run reports".into(),
        )),
    }
}

/// Train, then run one adaptation grid; returns the adapted model with its
/// provenance block.
pub fn adapt_single(
    cfg: &RunConfig,
    pair_idx: usize,
    method_id: &str,
    adaptation_id: &str,
    seed: u64,
) -> Result<SingleAdaptOutcome, RunError> {
    let pair = find_pair(cfg, pair_idx)?;
    let method = find_method(cfg, method_id)?;
    let adapt = method
        .adaptations
        .iter()
        .find(|a| a.id == adaptation_id)
        .ok_or_else(|| {
            RunError::Aggregate(format!(
                "method {method_id:?} has no adaptation {adaptation_id:?}"
            ))
        })?;
    let fail = |message: String| RunError::Job {
        job: format!("adapt {method_id}+{adaptation_id} on {}", pair.label()),
        message,
    };
    let trained = train_single(cfg, pair_idx, method_id, seed)?;
    let provider =
        EmbeddingProvider::new(cfg.provider.clone()).map_err(|e| fail(e.to_string()))?;
    let data = prepare_pair(cfg, pair, seed).map_err(fail)?;
    let prepared = prepare_features(cfg, method, &data, &provider, seed).map_err(fail)?;
    let job_seed = crate::seeding::derive_seed(seed, &["job", &pair.label(), &method.id]);
    // Domain-aware models adapt from the target-doc state.
    let base = match &prepared.target_doc {
        Some(doc) => adaptation::incontext_swap(&trained.params, &trained.spec, doc, "target")
            .map_err(|e| fail(e.to_string()))?,
        None => trained.params.clone(),
    };
    let outcome = run_adaptation(
        adapt,
        &trained.spec,
        &base,
        &prepared,
        data.target_ft.as_ref().map(|d| d.labels()).as_ref(),
        &prepared.val,
        &data.target_val.labels(),
        job_seed,
    )
    .map_err(fail)?
    .ok_or_else(|| fail("no finetune split under the validation-only allocation".into()))?;
    Ok(SingleAdaptOutcome {
        spec: trained.spec,
        params: outcome.params,
        meta: crate::neuralcore::AdaptationMeta {
            method: adaptation_id.to_string(),
            learning_rate: outcome.learning_rate,
            epochs: outcome.epochs,
            seed,
        },
        val_f1: outcome.val_f1,
    })
}

/// Decomposition and bound diagnostics for one pair (the `decompose` CLI).
pub fn diagnose_pair(
    cfg: &RunConfig,
    pair: &PairSpec,
    seed: u64,
) -> Result<PairDiagnostics, RunError> {
    diagnostics_job(cfg, pair, seed).map_err(|message| RunError::Job {
        job: format!("diagnose {}", pair.label()),
        message,
    })
}
