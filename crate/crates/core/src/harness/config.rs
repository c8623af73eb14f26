//! Run configuration: dataset source, domain pairs, method grids, budgets.
//!
//! Configs are JSON documents with a versioned `schema_version` field. The
//! desk profile ships small grids sized for a laptop run; the full profile
//! carries the complete hyperparameter tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{DomainOracle, ShiftSpec};
use crate::embedder::ProviderConfig;
use crate::robusttrain::DivergenceKind;
use crate::serializer::SerializationTemplate;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {0} (expected 1)")]
    Version(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// One source→target pair. Synthetic pairs carry their own shift strengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSpec {
    pub source_id: String,
    pub target_id: String,
    #[serde(default)]
    pub confounder_strength: f64,
    #[serde(default)]
    pub x_shift_strength: f64,
    /// CSV mode: file paths for the two domains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_csv: Option<PathBuf>,
}

impl PairSpec {
    pub fn label(&self) -> String {
        format!("{}->{}", self.source_id, self.target_id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Synthetic generator: per-pair shift strengths on a shared seed.
    Synthetic {
        n_features: usize,
        n_domains: usize,
        seed: u64,
    },
    /// CSV ingestion: schema and serializer config shipped as files.
    Csv {
        schema_file: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        serializer_file: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetAllocation {
    /// All 64 labeled target samples go to validation; no finetuning split.
    ValOnly64,
    /// 32 samples for validation, 32 for finetuning.
    Split32_32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Budgets {
    pub n_train: usize,
    pub n_test: usize,
    pub n_val: usize,
    pub n_finetune: usize,
    pub allocation: TargetAllocation,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            n_train: 2000,
            n_test: 1000,
            n_val: 32,
            n_finetune: 32,
            allocation: TargetAllocation::Split32_32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Tabular,
    Llm,
    /// Record embeddings concatenated with a per-domain information
    /// embedding (in-context block of labeled samples, or text files).
    LlmDomain,
}

/// How the per-domain information document is produced in llm_domain mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainInfoSpec {
    /// Serialize labeled samples of the domain as the in-context block.
    TargetSamples,
    /// Read `{domain_id}.txt` from a directory (Wikipedia-style or
    /// generated text shipped as files).
    Files { dir: PathBuf },
}

/// Neural-network hyperparameter grid (epochs are snapshot marks of one
/// training run per remaining combination).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NnGrid {
    pub learning_rates: Vec<f64>,
    pub hidden_dims: Vec<usize>,
    pub dropout_ratios: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl NnGrid {
    pub fn combinations(&self) -> usize {
        self.learning_rates.len()
            * self.hidden_dims.len()
            * self.dropout_ratios.len()
            * self.epochs.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelFamily {
    Nn {
        grid: NnGrid,
    },
    CvarNn {
        alphas: Vec<f64>,
        grid: NnGrid,
    },
    Logreg {
        regs: Vec<f64>,
    },
    SvmSqhinge {
        regs: Vec<f64>,
    },
    FdroLinear {
        divergence: DivergenceKind,
        radii: Vec<f64>,
    },
    WdroLinear {
        radii: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptKind {
    FullFinetune,
    Lora,
    Prefix,
    IncontextSwap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptGridSpec {
    pub id: String,
    pub kind: AdaptKind,
    #[serde(default)]
    pub learning_rates: Vec<f64>,
    #[serde(default)]
    pub epochs: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSpec {
    pub id: String,
    pub features: FeatureMode,
    pub model: ModelFamily,
    #[serde(default)]
    pub adaptations: Vec<AdaptGridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_info: Option<DomainInfoSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataSource,
    pub pairs: Vec<PairSpec>,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub budgets: Budgets,
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    /// Task description for serialization (synthetic mode and CSV mode
    /// without a serializer file).
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default)]
    pub template: SerializationTemplate,
    /// Worst-K values reported (in addition to the overall mean).
    #[serde(default)]
    pub worst_k: Vec<usize>,
    /// Capacity parameter fed to the bound diagnostic.
    #[serde(default = "default_capacity")]
    pub bound_capacity_d: usize,
    /// FractionBest gap threshold.
    #[serde(default = "default_delta")]
    pub fraction_best_delta: f64,
    /// Cap on evaluated configurations per method grid.
    #[serde(default = "default_grid_cap")]
    pub grid_cap: usize,
    pub out_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_task() -> String {
    "Classify whether the synthetic outcome indicator is positive for this record.".to_string()
}

fn default_capacity() -> usize {
    64
}

fn default_delta() -> f64 {
    0.01
}

fn default_grid_cap() -> usize {
    crate::evaluator::GRID_CAP
}

fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, json).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != 1 {
            return Err(ConfigError::Version(self.schema_version));
        }
        if self.pairs.is_empty() {
            return Err(ConfigError::Invalid("no pairs configured".into()));
        }
        if self.methods.is_empty() {
            return Err(ConfigError::Invalid("no methods configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("no seeds configured".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !ids.insert(&m.id) {
                return Err(ConfigError::Invalid(format!(
                    "duplicate method id {:?}",
                    m.id
                )));
            }
            if m.features == FeatureMode::LlmDomain && m.domain_info.is_none() {
                return Err(ConfigError::Invalid(format!(
                    "method {:?} uses llm_domain features but has no domain_info",
                    m.id
                )));
            }
            for a in &m.adaptations {
                let needs_domain = matches!(a.kind, AdaptKind::Prefix | AdaptKind::IncontextSwap);
                if needs_domain && m.features != FeatureMode::LlmDomain {
                    return Err(ConfigError::Invalid(format!(
                        "adaptation {:?} of method {:?} requires llm_domain features",
                        a.id, m.id
                    )));
                }
                let needs_grid = !matches!(a.kind, AdaptKind::IncontextSwap);
                if needs_grid && (a.learning_rates.is_empty() || a.epochs.is_empty()) {
                    return Err(ConfigError::Invalid(format!(
                        "adaptation {:?} of method {:?} needs a learning-rate and epoch grid",
                        a.id, m.id
                    )));
                }
            }
            if !matches!(
                m.model,
                ModelFamily::Nn { .. } | ModelFamily::CvarNn { .. }
            ) && !m.adaptations.is_empty()
            {
                return Err(ConfigError::Invalid(format!(
                    "method {:?}: adaptation applies to neural models only",
                    m.id
                )));
            }
        }
        if self.budgets.n_val < 2 || self.budgets.n_train < 2 || self.budgets.n_test < 2 {
            return Err(ConfigError::Invalid("budgets must be >= 2".into()));
        }
        for p in &self.pairs {
            if p.source_id == p.target_id {
                return Err(ConfigError::Invalid(format!(
                    "pair {} has identical source and target",
                    p.label()
                )));
            }
            if let DataSource::Csv { .. } = self.data {
                if p.source_csv.is_none() || p.target_csv.is_none() {
                    return Err(ConfigError::Invalid(format!(
                        "pair {} needs source_csv/target_csv in csv mode",
                        p.label()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Effective ShiftSpec for a synthetic pair at a protocol seed: the data
    /// seed is mixed with the pair label and replicate seed so every seed is
    /// an independent draw of the same shift setting.
    pub fn shift_spec_for(&self, pair: &PairSpec, seed: u64) -> Option<ShiftSpec> {
        match &self.data {
            DataSource::Synthetic {
                n_features,
                n_domains,
                seed: data_seed,
            } => Some(ShiftSpec {
                n_domains: *n_domains,
                confounder_strength: pair.confounder_strength,
                x_shift_strength: pair.x_shift_strength,
                n_features: *n_features,
                seed: crate::seeding::derive_seed(
                    *data_seed,
                    &["pair-data", &pair.label(), &seed.to_string()],
                ),
            }),
            DataSource::Csv { .. } => None,
        }
    }

    /// Content hash of the configuration (manifest key for resumability);
    /// invariant to the output location and worker count.
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        canonical.workers = 0;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        crate::seeding::sha256_hex(json.as_bytes())
    }
}

/// Training grids from the full-scale protocol tables.
pub mod grids {
    use super::*;

    pub fn tabular_nn() -> NnGrid {
        NnGrid {
            learning_rates: vec![0.001, 0.003, 0.005, 0.01],
            hidden_dims: vec![16, 32, 64, 128],
            dropout_ratios: vec![0.0, 0.1],
            epochs: vec![50, 100, 200],
        }
    }

    pub fn llm_nn() -> NnGrid {
        NnGrid {
            learning_rates: vec![0.001, 0.01],
            hidden_dims: vec![32, 64, 128],
            dropout_ratios: vec![0.0, 0.1],
            epochs: vec![100, 200, 300, 500],
        }
    }

    pub fn finetune_lrs() -> Vec<f64> {
        vec![1e-7, 1e-6, 1e-5, 1e-4]
    }

    pub fn lora_lrs() -> Vec<f64> {
        vec![1e-6, 1e-5, 1e-4, 1e-3, 0.01]
    }

    pub fn prefix_lrs() -> Vec<f64> {
        vec![1e-5, 1e-4, 1e-3, 0.01, 0.05, 0.1]
    }

    pub fn adaptation_epochs() -> Vec<usize> {
        vec![25, 50, 100]
    }

    pub fn logreg_regs() -> Vec<f64> {
        vec![
            1e-3, 3e-3, 5e-3, 7e-3, 1e-2, 3e-2, 5e-2, 7e-2, 0.1, 0.3, 0.5, 0.7, 1.0, 1.3, 1.7,
            5.0, 1e1, 5e1, 1e2, 5e2, 1e3, 5e3, 1e4,
        ]
    }

    pub fn cvar_alphas() -> Vec<f64> {
        vec![0.01, 0.1, 0.2, 0.3, 0.5, 1.0]
    }

    /// Divergence-ball radii: log-spaced through the small regime, then
    /// linear steps to the documented upper end.
    pub fn dro_radii(upper: f64) -> Vec<f64> {
        let mut r = vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2];
        let mut x = 0.1f64;
        while x < 0.99 + 1e-9 {
            r.push((x * 100.0).round() / 100.0);
            x += 0.11;
        }
        if upper > 1.0 {
            let mut x = 1.5f64;
            while x <= upper + 1e-9 {
                r.push(x);
                x += 0.5;
            }
        }
        r
    }
}

/// The 20-pair synthetic desk benchmark: a confounder-strength grid crossed
/// with two pair replicates, every pair spanning opposite confounder slots
/// so the strength knob translates directly into conditional shift.
pub fn desk_benchmark(out_dir: &Path, cache_dir: Option<PathBuf>, seed: u64) -> RunConfig {
    let n_domains = 2;
    let n_features = 8;
    // Probe ids until both slots are represented (slot assignment is a
    // seeded hash of the id).
    let probe_spec = ShiftSpec {
        n_domains,
        confounder_strength: 0.0,
        x_shift_strength: 0.0,
        n_features,
        seed,
    };
    let oracle = DomainOracle::new(&probe_spec).expect("probe spec is valid");
    let mut even = Vec::new();
    let mut odd = Vec::new();
    for i in 0..200 {
        let id = format!("d{i:03}");
        if oracle.domain_index(&id) % 2 == 0 {
            even.push(id);
        } else {
            odd.push(id);
        }
        if even.len() >= 20 && odd.len() >= 20 {
            break;
        }
    }
    let strengths = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25];
    let mut pairs = Vec::new();
    for (i, &cs) in strengths.iter().enumerate() {
        for rep in 0..2 {
            let idx = i * 2 + rep;
            pairs.push(PairSpec {
                source_id: even[idx].clone(),
                target_id: odd[idx].clone(),
                confounder_strength: cs,
                x_shift_strength: 0.0,
                source_csv: None,
                target_csv: None,
            });
        }
    }

    let desk_llm_grid = NnGrid {
        learning_rates: vec![0.003],
        hidden_dims: vec![64],
        dropout_ratios: vec![0.0],
        epochs: vec![4, 8],
    };
    let desk_tabular_grid = NnGrid {
        learning_rates: vec![0.005],
        hidden_dims: vec![32],
        dropout_ratios: vec![0.0],
        epochs: vec![20, 40],
    };
    let desk_ft = AdaptGridSpec {
        id: "ft".into(),
        kind: AdaptKind::FullFinetune,
        learning_rates: vec![1e-3, 3e-3],
        epochs: vec![50, 100],
    };

    RunConfig {
        schema_version: 1,
        data: DataSource::Synthetic {
            n_features,
            n_domains,
            seed,
        },
        pairs,
        provider: ProviderConfig::mock(cache_dir),
        budgets: Budgets {
            n_train: 2000,
            n_test: 600,
            n_val: 32,
            n_finetune: 32,
            allocation: TargetAllocation::Split32_32,
        },
        methods: vec![
            MethodSpec {
                id: "llm_nn".into(),
                features: FeatureMode::Llm,
                model: ModelFamily::Nn {
                    grid: desk_llm_grid,
                },
                adaptations: vec![desk_ft.clone()],
                domain_info: None,
            },
            MethodSpec {
                id: "tabular_nn".into(),
                features: FeatureMode::Tabular,
                model: ModelFamily::Nn {
                    grid: desk_tabular_grid,
                },
                adaptations: vec![desk_ft],
                domain_info: None,
            },
        ],
        seeds: vec![0, 1, 2, 3, 4],
        task: default_task(),
        template: SerializationTemplate::default(),
        worst_k: vec![5],
        bound_capacity_d: 64,
        fraction_best_delta: 0.01,
        grid_cap: default_grid_cap(),
        out_dir: out_dir.to_path_buf(),
        workers: default_workers(),
    }
}

/// Small sanity profile: one weak-shift pair, tiny budgets, one seed.
pub fn desk_smoke(out_dir: &Path, seed: u64) -> RunConfig {
    let mut cfg = desk_benchmark(out_dir, None, seed);
    cfg.pairs.truncate(1);
    cfg.seeds = vec![0];
    cfg.budgets = Budgets {
        n_train: 400,
        n_test: 200,
        n_val: 16,
        n_finetune: 16,
        allocation: TargetAllocation::Split32_32,
    };
    cfg
}

/// Full-scale profile: the complete method roster with the protocol grids
/// over the synthetic pair list (swap in CSV pairs for real data).
pub fn full_profile(out_dir: &Path, cache_dir: Option<PathBuf>, seed: u64) -> RunConfig {
    let mut cfg = desk_benchmark(out_dir, cache_dir, seed);
    cfg.budgets = Budgets {
        n_train: 20_000,
        n_test: 20_000,
        n_val: 32,
        n_finetune: 32,
        allocation: TargetAllocation::Split32_32,
    };
    let ft = AdaptGridSpec {
        id: "ft".into(),
        kind: AdaptKind::FullFinetune,
        learning_rates: grids::finetune_lrs(),
        epochs: grids::adaptation_epochs(),
    };
    let lora = AdaptGridSpec {
        id: "lora".into(),
        kind: AdaptKind::Lora,
        learning_rates: grids::lora_lrs(),
        epochs: grids::adaptation_epochs(),
    };
    cfg.methods = vec![
        MethodSpec {
            id: "tabular_lr".into(),
            features: FeatureMode::Tabular,
            model: ModelFamily::Logreg {
                regs: grids::logreg_regs(),
            },
            adaptations: vec![],
            domain_info: None,
        },
        MethodSpec {
            id: "tabular_svm".into(),
            features: FeatureMode::Tabular,
            model: ModelFamily::SvmSqhinge {
                regs: grids::logreg_regs(),
            },
            adaptations: vec![],
            domain_info: None,
        },
        MethodSpec {
            id: "kl_dro".into(),
            features: FeatureMode::Tabular,
            model: ModelFamily::FdroLinear {
                divergence: DivergenceKind::Kl,
                radii: grids::dro_radii(0.99),
            },
            adaptations: vec![],
            domain_info: None,
        },
        MethodSpec {
            id: "chi2_dro".into(),
            features: FeatureMode::Tabular,
            model: ModelFamily::FdroLinear {
                divergence: DivergenceKind::Chi2,
                radii: grids::dro_radii(0.99),
            },
            adaptations: vec![],
            domain_info: None,
        },
        MethodSpec {
            id: "wdro".into(),
            features: FeatureMode::Tabular,
            model: ModelFamily::WdroLinear {
                radii: grids::dro_radii(3.0),
            },
            adaptations: vec![],
            domain_info: None,
        },
        MethodSpec {
            id: "cvar_dro_nn".into(),
            features: FeatureMode::Tabular,
            model: ModelFamily::CvarNn {
                alphas: grids::cvar_alphas(),
                grid: grids::tabular_nn(),
            },
            adaptations: vec![],
            domain_info: None,
        },
        MethodSpec {
            id: "tabular_nn".into(),
            features: FeatureMode::Tabular,
            model: ModelFamily::Nn {
                grid: grids::tabular_nn(),
            },
            adaptations: vec![ft.clone(), lora.clone()],
            domain_info: None,
        },
        MethodSpec {
            id: "llm_nn".into(),
            features: FeatureMode::Llm,
            model: ModelFamily::Nn {
                grid: grids::llm_nn(),
            },
            adaptations: vec![ft.clone(), lora.clone()],
            domain_info: None,
        },
        MethodSpec {
            id: "llm_ic_nn".into(),
            features: FeatureMode::LlmDomain,
            model: ModelFamily::Nn {
                grid: grids::llm_nn(),
            },
            adaptations: vec![
                ft,
                lora,
                AdaptGridSpec {
                    id: "prefix".into(),
                    kind: AdaptKind::Prefix,
                    learning_rates: grids::prefix_lrs(),
                    epochs: grids::adaptation_epochs(),
                },
                AdaptGridSpec {
                    id: "swap".into(),
                    kind: AdaptKind::IncontextSwap,
                    learning_rates: vec![],
                    epochs: vec![],
                },
            ],
            domain_info: Some(DomainInfoSpec::TargetSamples),
        },
    ];
    cfg
}

/// Method score table keyed by setting, assembled by reports.
pub type SettingScores = BTreeMap<String, BTreeMap<String, f64>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_benchmark_is_valid_and_has_opposite_slots() {
        let cfg = desk_benchmark(Path::new("/tmp/x"), None, 42);
        cfg.validate().unwrap();
        assert_eq!(cfg.pairs.len(), 20);
        let spec = cfg.shift_spec_for(&cfg.pairs[3], 0).unwrap();
        let oracle = DomainOracle::new(&spec).unwrap();
        for p in &cfg.pairs {
            let a = oracle.domain_index(&p.source_id) % 2;
            let b = oracle.domain_index(&p.target_id) % 2;
            assert_ne!(a, b, "pair {} shares a slot", p.label());
        }
    }

    #[test]
    fn shift_spec_varies_by_seed_but_not_run_to_run() {
        let cfg = desk_benchmark(Path::new("/tmp/x"), None, 7);
        let a = cfg.shift_spec_for(&cfg.pairs[0], 0).unwrap();
        let b = cfg.shift_spec_for(&cfg.pairs[0], 0).unwrap();
        let c = cfg.shift_spec_for(&cfg.pairs[0], 1).unwrap();
        assert_eq!(a.seed, b.seed);
        assert_ne!(a.seed, c.seed);
    }

    #[test]
    fn config_round_trips_and_hash_ignores_out_dir() {
        let cfg = desk_benchmark(Path::new("/tmp/a"), None, 1);
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        let mut moved = cfg.clone();
        moved.out_dir = PathBuf::from("/tmp/b");
        moved.workers = 3;
        assert_eq!(cfg.content_hash(), moved.content_hash());
    }

    #[test]
    fn validation_rejects_incoherent_methods() {
        let mut cfg = desk_benchmark(Path::new("/tmp/x"), None, 1);
        cfg.methods[0].adaptations.push(AdaptGridSpec {
            id: "swap".into(),
            kind: AdaptKind::IncontextSwap,
            learning_rates: vec![],
            epochs: vec![],
        });
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn full_profile_grid_sizes_match_the_protocol_tables() {
        let cfg = full_profile(Path::new("/tmp/x"), None, 1);
        cfg.validate().unwrap();
        let by_id = |id: &str| cfg.methods.iter().find(|m| m.id == id).unwrap();
        match &by_id("tabular_nn").model {
            ModelFamily::Nn { grid } => assert_eq!(grid.combinations(), 96),
            _ => panic!(),
        }
        match &by_id("llm_nn").model {
            ModelFamily::Nn { grid } => assert_eq!(grid.combinations(), 48),
            _ => panic!(),
        }
        match &by_id("tabular_lr").model {
            ModelFamily::Logreg { regs } => assert_eq!(regs.len(), 23),
            _ => panic!(),
        }
        match &by_id("cvar_dro_nn").model {
            ModelFamily::CvarNn { alphas, .. } => assert_eq!(alphas.len(), 6),
            _ => panic!(),
        }
        let ft = &by_id("llm_nn").adaptations[0];
        assert_eq!(ft.learning_rates.len() * ft.epochs.len(), 12);
        let lora = &by_id("llm_nn").adaptations[1];
        assert_eq!(lora.learning_rates.len() * lora.epochs.len(), 15);
        let prefix = &by_id("llm_ic_nn").adaptations[2];
        assert_eq!(prefix.learning_rates.len() * prefix.epochs.len(), 18);
    }
}
