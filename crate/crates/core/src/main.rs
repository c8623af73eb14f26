//! Command-line surface over the benchmark laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tslab::datagen;
use tslab::embedder::{EmbeddingProvider, ProviderConfig, ProviderKind};
use tslab::harness::{self, RunConfig};
use tslab::neuralcore::save_checkpoint;
use tslab::serializer::{serialize_record, SerializerConfig, TaskDescription};

#[derive(Parser)]
#[command(name = "tslab", about = "Tabular Y|X-shift benchmark laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Remote,
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic domain datasets into the columnar cache format.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Protocol seed selecting the replicate to materialize.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serialize a cached dataset into instruct/query prompts (JSONL).
    Serialize {
        #[arg(long)]
        data: PathBuf,
        /// Serializer config (task + templates); defaults when omitted.
        #[arg(long)]
        serializer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a cached dataset, warming the embedding cache.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        serializer: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mock")]
        provider: ProviderArg,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value = "tslab-mock")]
        model_name: String,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Train one method on one pair and save the selected checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Pair index within the config.
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Method id within the config.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a trained model with one adaptation grid and save it.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        pair: usize,
        #[arg(long)]
        method: String,
        /// Adaptation id within the method.
        #[arg(long)]
        adaptation: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompose the source→target drop for one pair.
    Decompose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        pair: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full benchmark protocol.
    Bench {
        /// Run configuration; omitted = a generated profile config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        provider: Option<ProviderArg>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Regenerate report tables from a run directory's event log.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_serializer(
    path: &Option<PathBuf>,
) -> Result<(tslab::serializer::SerializationTemplate, TaskDescription), String> {
    match path {
        Some(p) => {
            let sc = SerializerConfig::load(p).map_err(|e| e.to_string())?;
            let task = TaskDescription::new(&sc.task).map_err(|e| e.to_string())?;
            Ok((sc.template, task))
        }
        None => Ok((
            Default::default(),
            TaskDescription::new(
                "Classify whether the synthetic outcome indicator is positive for this record.",
            )
            .map_err(|e| e.to_string())?,
        )),
    }
}

#[allow(clippy::too_many_arguments)]
fn bench_config(
    config: Option<PathBuf>,
    profile: ProfileArg,
    out: Option<PathBuf>,
    workers: Option<usize>,
    seed: Option<u64>,
    provider: Option<ProviderArg>,
    endpoint: Option<String>,
    cache_dir: Option<PathBuf>,
) -> Result<RunConfig, String> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(&path).map_err(|e| e.to_string())?,
        None => {
            let out = out
                .clone()
                .ok_or_else(|| "--out is required without --config".to_string())?;
            match profile {
                ProfileArg::Desk => {
                    harness::desk_benchmark(&out, cache_dir.clone(), seed.unwrap_or(42))
                }
                ProfileArg::Full => {
                    harness::full_profile(&out, cache_dir.clone(), seed.unwrap_or(42))
                }
            }
        }
    };
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(p) = provider {
        cfg.provider.kind = match p {
            ProviderArg::Mock => ProviderKind::Mock,
            ProviderArg::Remote => ProviderKind::Remote,
        };
    }
    if let Some(e) = endpoint {
        cfg.provider.endpoint = Some(e);
        cfg.provider.kind = ProviderKind::Remote;
    }
    if cache_dir.is_some() {
        cfg.provider.cache_dir = cache_dir;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn real_main() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let mut written = 0;
            for pair in &cfg.pairs {
                let Some(spec) = cfg.shift_spec_for(pair, seed) else {
                    return Err("gen-data requires a synthetic data source".into());
                };
                let (src, tgt) = datagen::generate_pair(
                    &spec,
                    &pair.source_id,
                    &pair.target_id,
                    cfg.budgets.n_train + cfg.budgets.n_test,
                    cfg.budgets.n_test + 256,
                )
                .map_err(|e| e.to_string())?;
                for d in [&src, &tgt] {
                    let path = out.join(format!(
                        "{}__{}.tsd",
                        pair.label().replace("->", "_to_"),
                        d.domain_id
                    ));
                    datagen::write_dataset_cache(&path, d).map_err(|e| e.to_string())?;
                    written += 1;
                }
            }
            println!("wrote {written} dataset cache files to {}", out.display());
            Ok(())
        }
        Command::Serialize {
            data,
            serializer,
            out,
        } => {
            let ds = datagen::read_dataset_cache(&data).map_err(|e| e.to_string())?;
            let (template, task) = load_serializer(&serializer)?;
            let mut body = String::new();
            for r in &ds.records {
                let p =
                    serialize_record(r, &ds.schema, &template, &task).map_err(|e| e.to_string())?;
                let line = serde_json::json!({"record_id": r.record_id, "prompt": p.text});
                body.push_str(&line.to_string());
                body.push('\n');
            }
            std::fs::write(&out, body).map_err(|e| e.to_string())?;
            println!("serialized {} records to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Embed {
            data,
            serializer,
            provider,
            endpoint,
            model_name,
            cache_dir,
        } => {
            let ds = datagen::read_dataset_cache(&data).map_err(|e| e.to_string())?;
            let (template, task) = load_serializer(&serializer)?;
            let cfg = ProviderConfig {
                kind: match provider {
                    ProviderArg::Mock => ProviderKind::Mock,
                    ProviderArg::Remote => ProviderKind::Remote,
                },
                endpoint,
                model_name,
                cache_dir,
                ..ProviderConfig::mock(None)
            };
            let provider = EmbeddingProvider::new(cfg).map_err(|e| e.to_string())?;
            let vs = provider
                .embed_dataset(&ds, &template, &task)
                .map_err(|e| e.to_string())?;
            println!(
                "embedded {} records (dim {}), {} provider calls",
                vs.len(),
                vs.first().map(|v| v.dim()).unwrap_or(0),
                provider.provider_calls()
            );
            Ok(())
        }
        Command::Train {
            config,
            pair,
            method,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
            let single =
                harness::run::train_single(&cfg, pair, &method, seed).map_err(|e| e.to_string())?;
            save_checkpoint(&out, &single.spec, &single.params, None).map_err(|e| e.to_string())?;
            println!(
                "trained {method} [{}] val_macro_f1={:.4}; checkpoint at {}",
                single.config_id,
                single.val_f1,
                out.display()
            );
            Ok(())
        }
        Command::Adapt {
            config,
            pair,
            method,
            adaptation,
            seed,
            out,
        } => {
            let cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
            let single = harness::run::adapt_single(&cfg, pair, &method, &adaptation, seed)
                .map_err(|e| e.to_string())?;
            save_checkpoint(&out, &single.spec, &single.params, Some(single.meta))
                .map_err(|e| e.to_string())?;
            println!(
                "adapted {method}+{adaptation} val_macro_f1={:.4}; checkpoint at {}",
                single.val_f1,
                out.display()
            );
            Ok(())
        }
        Command::Decompose { config, pair, seed } => {
            let cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
            let p = cfg
                .pairs
                .get(pair)
                .ok_or_else(|| format!("pair index {pair} out of range"))?;
            let diag = harness::run::diagnose_pair(&cfg, p, seed).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&diag).expect("serializes"));
            Ok(())
        }
        Command::Bench {
            config,
            profile,
            out,
            workers,
            seed,
            provider,
            endpoint,
            cache_dir,
        } => {
            let cfg = bench_config(
                config, profile, out, workers, seed, provider, endpoint, cache_dir,
            )?;
            let report = harness::run(&cfg).map_err(|e| e.to_string())?;
            println!(
                "bench complete: {} records, {} settings aggregated, {} errors",
                report.records.len(),
                report.setting_aggregates.len(),
                report.errors.len()
            );
            for (method, mean) in &report.overall_means {
                println!("  {method}: mean target macro-F1 {mean:.4}");
            }
            if let Some(ratios) = &report.fraction_best.ratios {
                for (method, r) in ratios {
                    println!("  fraction-best {method}: {r:.3}");
                }
            }
            println!("outputs in {}", cfg.out_dir.display());
            Ok(())
        }
        Command::Report { out } => {
            let cfg_path = out.join("config.json");
            let mut cfg = RunConfig::load(&cfg_path).map_err(|e| e.to_string())?;
            cfg.out_dir = out;
            let report = harness::reaggregate(&cfg).map_err(|e| e.to_string())?;
            println!(
                "report regenerated from {} records into {}",
                report.records.len(),
                cfg.out_dir.join("report").display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
