use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use rap_core::adapt::{process_stream, AdaptationState, StreamMode, StreamOptions};
use rap_core::config::{load_config_file, RunConfig};
use rap_core::corpus::{load_store, save_meta, save_store, EmbeddingStore, StoreKind, Vocabulary};
use rap_core::detector::{load_bank, save_bank, score_batch_with};
use rap_core::eval::{
    generate_synthetic, read_scores_jsonl, run_benchmark, write_scores_jsonl, BenchmarkOptions, MetricReport,
    MetricsFile, SyntheticConfig,
};
use rap_core::exec::Exec;
use rap_core::mining::{mine_all_with, MinedRepresentations};
use rap_core::pipeline::{provenance, retrieval_audit, run_pipeline, train_bank, PipelineInputs};
use rap_core::retrieval::{retrieve_train_prompts, RetrievalOptions};

#[derive(Parser)]
#[command(name = "rap", version, about = "Retrieval-augmented prompt OOD detection over precomputed embeddings")]
struct Cli {
    /// Run every stage on one thread regardless of RAP_THREADS.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select ID and outlier representations from training crops.
    Mine {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_id: PathBuf,
        #[arg(long)]
        out_ood: PathBuf,
    },
    /// Rank the vocabulary by joint similarity and build the training bank.
    Retrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mined_id: PathBuf,
        #[arg(long)]
        mined_ood: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score images against a frozen bank.
    Detect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a stream of images while growing the bank.
    Stream {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the adapted bank.
        #[arg(long)]
        bank_out: Option<PathBuf>,
    },
    /// Compute AUROC, FPR95 and histograms from two score files.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        id_scores: PathBuf,
        #[arg(long)]
        ood_scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic benchmark as embedding stores.
    Synth {
        /// JSON file with synthetic generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Mine, retrieve, detect or stream, and evaluate in one go.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// RAP against the MCM baseline, with optional variants.
    Benchmark {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also run train-only and train&test variants.
        #[arg(long)]
        adapt_modes: bool,
        /// Also run joint-similarity ablations.
        #[arg(long)]
        ablations: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run configuration flags. Every flag overrides the config file, which
/// overrides the preset.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    #[arg(long)]
    preset: Option<String>,
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding id_prompts.rap, vocab.rap, crops.rap, id_test.rap, ood_test.rap.
    #[arg(long)]
    store_dir: Option<PathBuf>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long = "P")]
    p: Option<usize>,
    #[arg(long = "Q")]
    q: Option<usize>,
    #[arg(long = "N_g", alias = "n-groups")]
    n_groups: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lambda1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lambda2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lambda3: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    u1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    u2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    #[arg(long)]
    ensemble_seed: Option<u64>,
    #[arg(long)]
    stream_seed: Option<u64>,
    #[arg(long)]
    mode: Option<StreamMode>,
    #[arg(long)]
    disable_sim1: bool,
    #[arg(long)]
    disable_sim2: bool,
    #[arg(long)]
    disable_sim3: bool,
    #[arg(long)]
    disable_test_adapt: bool,
    #[arg(long)]
    max_test_prompts: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    id_prompts: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    crops: Option<PathBuf>,
    #[arg(long)]
    id_test: Option<PathBuf>,
    #[arg(long)]
    ood_test: Option<PathBuf>,
}

impl ConfigArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_owned(), v);
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p));
        let flag = |b: bool| b.then_some(Value::Bool(true));
        put("preset", self.preset.as_ref().map(|p| json!(p)));
        if let Some(dir) = &self.store_dir {
            for (key, file) in [
                ("id_prompts", "id_prompts.rap"),
                ("vocab", "vocab.rap"),
                ("crops", "crops.rap"),
                ("id_test", "id_test.rap"),
                ("ood_test", "ood_test.rap"),
            ] {
                put(key, Some(json!(dir.join(file))));
            }
        }
        put("M", self.m.map(|v| json!(v)));
        put("L", self.l.map(|v| json!(v)));
        put("P", self.p.map(|v| json!(v)));
        put("Q", self.q.map(|v| json!(v)));
        put("N_g", self.n_groups.map(|v| json!(v)));
        put("tau", self.tau.map(|v| json!(v)));
        put("eta", self.eta.map(|v| json!(v)));
        put("lambda1", self.lambda1.map(|v| json!(v)));
        put("lambda2", self.lambda2.map(|v| json!(v)));
        put("lambda3", self.lambda3.map(|v| json!(v)));
        put("u1", self.u1.map(|v| json!(v)));
        put("u2", self.u2.map(|v| json!(v)));
        put("gamma", self.gamma.map(|v| json!(v)));
        put("ensemble_seed", self.ensemble_seed.map(|v| json!(v)));
        put("stream_seed", self.stream_seed.map(|v| json!(v)));
        put("mode", self.mode.map(|v| json!(v)));
        put("disable_sim1", flag(self.disable_sim1));
        put("disable_sim2", flag(self.disable_sim2));
        put("disable_sim3", flag(self.disable_sim3));
        put("disable_test_adapt", flag(self.disable_test_adapt));
        put("max_test_prompts", self.max_test_prompts.map(|v| json!(v)));
        put("batch", self.batch.map(|v| json!(v)));
        put("id_prompts", path(&self.id_prompts));
        put("vocab", path(&self.vocab));
        put("crops", path(&self.crops));
        put("id_test", path(&self.id_test));
        put("ood_test", path(&self.ood_test));
        m
    }

    fn resolve(&self) -> Result<RunConfig> {
        let file = self.config.as_deref().map(load_config_file).transpose()?;
        Ok(RunConfig::resolve(file.as_ref(), &self.overrides())?)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("missing store path `{key}` (use --{} or --store-dir)", key.replace('_', "-")))
}

fn load(path: &Path, kind: StoreKind) -> Result<EmbeddingStore> {
    let loaded = load_store(path).with_context(|| format!("loading {}", path.display()))?;
    if loaded.renormalized_rows > 0 {
        log::warn!("{}: renormalized {} rows", path.display(), loaded.renormalized_rows);
    }
    loaded.store.expect_kind(kind).with_context(|| path.display().to_string())?;
    Ok(loaded.store)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `RAP_THREADS` bounds the worker pool; unset or 0 leaves it automatic.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("RAP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().with_context(|| format!("RAP_THREADS={raw:?} is not a count"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    init_threads()?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Mine { cfg, out_id, out_ood } => {
            let cfg = cfg.resolve()?;
            let crops = load(required(&cfg.crops, "crops")?, StoreKind::Crops)?;
            let prompts = load(required(&cfg.id_prompts, "id_prompts")?, StoreKind::IdPrompts)?;
            let mined = mine_all_with(&crops, &prompts, &cfg.mining(), exec)?;
            let (id, ood) = mined.to_stores();
            let meta = provenance(&cfg);
            for (path, store) in [(&out_id, &id), (&out_ood, &ood)] {
                save_store(store, path)?;
                save_meta(path, &meta)?;
            }
            println!("mined {} ID and {} outlier representations", id.count(), ood.count());
        }
        Command::Retrieve { cfg, mined_id, mined_ood, out } => {
            let cfg = cfg.resolve()?;
            let prompts = load(required(&cfg.id_prompts, "id_prompts")?, StoreKind::IdPrompts)?;
            let vocab_store = load(required(&cfg.vocab, "vocab")?, StoreKind::Vocabulary)?;
            let vocab = Vocabulary::from_store(&vocab_store)?;
            let mined = MinedRepresentations::from_stores(
                &load(&mined_id, StoreKind::Images)?,
                &load(&mined_ood, StoreKind::Images)?,
            )?;
            let opts = RetrievalOptions { ablation: cfg.ablation(), filter_id_names: true, exec };
            let result = retrieve_train_prompts(&vocab, &mined, &prompts, &cfg.weights(), cfg.p, &opts)?;
            let bank = train_bank(&prompts, &vocab, &result, &cfg)?;
            save_bank(&bank, &out, &provenance(&cfg))?;
            write_json(&out.with_extension("audit.json"), &retrieval_audit(&result, &cfg))?;
            println!("retrieved {} OOD prompts into {} groups", bank.total_ood(), bank.n_groups());
        }
        Command::Detect { cfg, bank, images, out } => {
            let cfg = cfg.resolve()?;
            let bank = load_bank(&bank)?.bank;
            let images = load(&images, StoreKind::Images)?;
            let det = rap_core::detector::DetectorConfig { n_groups: bank.n_groups(), ..cfg.detector() };
            let reports = score_batch_with(&images, 0..images.count(), &bank, &det, exec)?;
            write_scores_jsonl(&out, &reports)?;
            println!("scored {} samples", reports.len());
        }
        Command::Stream { cfg, bank, images, out, bank_out } => {
            let cfg = cfg.resolve()?;
            let bank = load_bank(&bank)?.bank;
            let images = load(&images, StoreKind::Images)?;
            let vocab = Vocabulary::from_store(&load(required(&cfg.vocab, "vocab")?, StoreKind::Vocabulary)?)?;
            let det = rap_core::detector::DetectorConfig { n_groups: bank.n_groups(), ..cfg.detector() };
            let opts = StreamOptions { mode: cfg.mode, batch: cfg.batch, exec };
            let outcome = process_stream(&images, AdaptationState::new(bank), &vocab, &det, &cfg.band(), &opts)?;
            write_scores_jsonl(&out, outcome.final_reports())?;
            let log = serde_json::to_value(outcome.state.update_log())?;
            let mut meta = provenance(&cfg);
            meta["updates"] = log;
            write_json(&out.with_extension("updates.json"), &meta)?;
            if let Some(p) = bank_out {
                save_bank(outcome.state.bank(), &p, &provenance(&cfg))?;
            }
            println!(
                "scored {} samples; bank version {} with {} test-time prompts",
                outcome.reports.len(),
                outcome.state.bank().version(),
                outcome.state.test_prompt_count()
            );
        }
        Command::Eval { cfg, id_scores, ood_scores, out } => {
            let cfg = cfg.resolve()?;
            let scores = |p: &Path| -> Result<Vec<f64>> { Ok(read_scores_jsonl(p)?.into_iter().map(|r| r.score).collect()) };
            let report = MetricReport::compute(&scores(&id_scores)?, &scores(&ood_scores)?)?;
            write_json(&out, &serde_json::to_value(MetricsFile::new(report.clone(), &cfg))?)?;
            println!("AUROC {:.4}  FPR95 {:.4}", report.auroc, report.fpr95);
        }
        Command::Synth { config, seed, out_dir } => {
            let mut sc: SyntheticConfig = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SyntheticConfig::default(),
            };
            if let Some(s) = seed {
                sc.seed = s;
            }
            let data = generate_synthetic(&sc)?;
            std::fs::create_dir_all(&out_dir)?;
            let meta = json!({ "synthetic": sc, "tool_version": rap_core::TOOL_VERSION });
            for (name, store) in data.stores() {
                let path = out_dir.join(name);
                save_store(store, &path)?;
                save_meta(&path, &meta)?;
            }
            println!("wrote synthetic stores to {}", out_dir.display());
        }
        Command::Pipeline { cfg, out_dir } => {
            let cfg = cfg.resolve()?;
            let out = run_pipeline(&cfg, &out_dir, exec)?;
            println!(
                "AUROC {:.4}  FPR95 {:.4}  prompts {} (bank version {})",
                out.metrics.auroc,
                out.metrics.fpr95,
                out.final_bank.total_ood(),
                out.final_bank.version()
            );
        }
        Command::Benchmark { cfg, adapt_modes, ablations, out } => {
            let cfg = cfg.resolve()?;
            let inputs = PipelineInputs::load(&cfg)?;
            let report = run_benchmark(&inputs, &cfg, &BenchmarkOptions { adapt_modes, ablations }, exec)?;
            write_json(&out, &serde_json::to_value(&report)?)?;
            println!("RAP AUROC {:.4}  MCM AUROC {:.4}", report.rap.auroc, report.mcm.auroc);
            for v in &report.variants {
                println!("  {:<12} AUROC {:.4}  FPR95 {:.4}", v.name, v.metrics.auroc, v.metrics.fpr95);
            }
        }
    }
    Ok(())
}
