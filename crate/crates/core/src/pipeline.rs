//! Mine, retrieve, detect or stream, evaluate.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::adapt::{process_stream, AdaptationState, StreamOptions, UpdateRecord};
use crate::config::RunConfig;
use crate::corpus::{load_store, EmbeddingStore, StoreKind, Vocabulary};
use crate::detector::{save_bank, score_batch_with, OodPrompt, PromptBank, PromptOrigin, SampleScore};
use crate::eval::{write_scores_jsonl, MetricReport, MetricsFile};
use crate::exec::Exec;
use crate::mining::{mine_all_with, MinedRepresentations};
use crate::retrieval::{retrieve_train_prompts, RetrievalOptions, RetrievalResult};
use crate::vecops::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Mine,
    Retrieve,
    Detect,
    Stream,
    Eval,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Mine => "mine",
            Stage::Retrieve => "retrieve",
            Stage::Detect => "detect",
            Stage::Stream => "stream",
            Stage::Eval => "eval",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {error}")]
pub struct PipelineError {
    pub stage: Stage,
    pub error: Box<dyn std::error::Error + Send + Sync>,
}

impl PipelineError {
    fn at<E: Into<Box<dyn std::error::Error + Send + Sync>>>(stage: Stage) -> impl FnOnce(E) -> Self {
        move |e| PipelineError { stage, error: e.into() }
    }
}

/// Every store a run consumes.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub id_prompts: EmbeddingStore,
    pub vocab: EmbeddingStore,
    pub crops: EmbeddingStore,
    pub id_test: EmbeddingStore,
    pub ood_test: EmbeddingStore,
}

impl PipelineInputs {
    /// Loads the stores named in `cfg`. A missing or broken store is
    /// reported against the stage that consumes it.
    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let get = |path: &Option<PathBuf>, key: &str, kind: StoreKind, stage: Stage| {
            let path = path.as_ref().ok_or_else(|| PipelineError::at(stage)(format!("no `{key}` store path given")))?;
            let loaded = load_store(path).map_err(PipelineError::at(stage))?;
            if loaded.renormalized_rows > 0 {
                log::warn!("{}: renormalized {} rows", path.display(), loaded.renormalized_rows);
            }
            loaded.store.expect_kind(kind).map_err(PipelineError::at(stage))?;
            Ok::<_, PipelineError>(loaded.store)
        };
        let test_stage = if cfg.disable_test_adapt { Stage::Detect } else { Stage::Stream };
        Ok(Self {
            id_prompts: get(&cfg.id_prompts, "id_prompts", StoreKind::IdPrompts, Stage::Mine)?,
            crops: get(&cfg.crops, "crops", StoreKind::Crops, Stage::Mine)?,
            vocab: get(&cfg.vocab, "vocab", StoreKind::Vocabulary, Stage::Retrieve)?,
            id_test: get(&cfg.id_test, "id_test", StoreKind::Images, test_stage)?,
            ood_test: get(&cfg.ood_test, "ood_test", StoreKind::Images, test_stage)?,
        })
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTiming {
    pub mine_ms: f64,
    pub retrieve_ms: f64,
    pub score_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub config: RunConfig,
    pub mined: MinedRepresentations,
    pub retrieval: RetrievalResult,
    /// Bank right after training-time retrieval.
    pub train_bank: PromptBank,
    pub final_bank: PromptBank,
    pub id_reports: Vec<SampleScore>,
    pub ood_reports: Vec<SampleScore>,
    /// Stream order reports; `None` when test-time adaptation is off.
    pub stream_reports: Option<Vec<SampleScore>>,
    pub update_log: Vec<UpdateRecord>,
    pub metrics: MetricReport,
    pub timing: StageTiming,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Builds the training-time bank from the retrieved words.
pub fn train_bank(
    id_prompts: &EmbeddingStore,
    vocab: &Vocabulary,
    retrieval: &RetrievalResult,
    cfg: &RunConfig,
) -> Result<PromptBank, PipelineError> {
    let mut ood = EmbeddingMatrix::empty(vocab.dim()).map_err(PipelineError::at(Stage::Retrieve))?;
    for &i in &retrieval.vocab_indices {
        ood.push_row(vocab.prompt_embedding(i)).map_err(PipelineError::at(Stage::Retrieve))?;
    }
    let meta = retrieval
        .selected
        .iter()
        .map(|e| OodPrompt { word: e.word.clone(), pos: e.pos, origin: PromptOrigin::Train })
        .collect();
    PromptBank::new(id_prompts.labels.clone(), id_prompts.matrix.clone(), ood, meta, cfg.n_groups, cfg.ensemble_seed)
        .map_err(PipelineError::at(Stage::Retrieve))
}

/// ID and OOD test rows interleaved by a seeded shuffle. The second vector
/// maps stream positions back to `(is_id, row)`.
pub fn build_stream(id_test: &EmbeddingStore, ood_test: &EmbeddingStore, seed: u64) -> (EmbeddingStore, Vec<(bool, usize)>) {
    let mut order: Vec<(bool, usize)> =
        (0..id_test.count()).map(|i| (true, i)).chain((0..ood_test.count()).map(|i| (false, i))).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut matrix = EmbeddingMatrix::empty(id_test.dim()).expect("non-zero dim");
    let mut labels = Vec::with_capacity(order.len());
    for &(is_id, i) in &order {
        let src = if is_id { id_test } else { ood_test };
        matrix.push_row(src.matrix.row(i)).expect("test stores share one dim");
        labels.push(src.labels[i].clone());
    }
    (EmbeddingStore::untagged(StoreKind::Images, matrix, labels), order)
}

pub fn run_stages(inputs: &PipelineInputs, cfg: &RunConfig, exec: Exec) -> Result<PipelineOutput, PipelineError> {
    cfg.validate().map_err(PipelineError::at(Stage::Config))?;
    let mut timing = StageTiming::default();

    let t = Instant::now();
    let mined = mine_all_with(&inputs.crops, &inputs.id_prompts, &cfg.mining(), exec).map_err(PipelineError::at(Stage::Mine))?;
    timing.mine_ms = ms(t);

    let t = Instant::now();
    let vocab = Vocabulary::from_store(&inputs.vocab).map_err(PipelineError::at(Stage::Retrieve))?;
    let opts = RetrievalOptions { ablation: cfg.ablation(), filter_id_names: true, exec };
    let retrieval = retrieve_train_prompts(&vocab, &mined, &inputs.id_prompts, &cfg.weights(), cfg.p, &opts)
        .map_err(PipelineError::at(Stage::Retrieve))?;
    let bank = train_bank(&inputs.id_prompts, &vocab, &retrieval, cfg)?;
    timing.retrieve_ms = ms(t);

    let t = Instant::now();
    let det = cfg.detector();
    let (id_reports, ood_reports, stream_reports, final_bank, update_log) = if cfg.disable_test_adapt {
        let score = |s: &EmbeddingStore| score_batch_with(s, 0..s.count(), &bank, &det, exec);
        let id = score(&inputs.id_test).map_err(PipelineError::at(Stage::Detect))?;
        let ood = score(&inputs.ood_test).map_err(PipelineError::at(Stage::Detect))?;
        (id, ood, None, bank.clone(), Vec::new())
    } else {
        if inputs.id_test.dim() != inputs.ood_test.dim() {
            return Err(PipelineError::at(Stage::Stream)(format!(
                "id_test dim {} differs from ood_test dim {}",
                inputs.id_test.dim(),
                inputs.ood_test.dim()
            )));
        }
        let (stream, order) = build_stream(&inputs.id_test, &inputs.ood_test, cfg.stream_seed);
        let sopts = StreamOptions { mode: cfg.mode, batch: cfg.batch, exec };
        let out = process_stream(&stream, AdaptationState::new(bank.clone()), &vocab, &det, &cfg.band(), &sopts)
            .map_err(PipelineError::at(Stage::Stream))?;
        let mut id: Vec<Option<SampleScore>> = vec![None; inputs.id_test.count()];
        let mut ood: Vec<Option<SampleScore>> = vec![None; inputs.ood_test.count()];
        for (r, &(is_id, i)) in out.final_reports().iter().zip(&order) {
            let slot = if is_id { &mut id[i] } else { &mut ood[i] };
            *slot = Some(r.clone());
        }
        let collect = |v: Vec<Option<SampleScore>>| v.into_iter().map(|r| r.expect("every row is scored")).collect();
        let log = out.state.update_log().to_vec();
        let reports = out.final_reports().to_vec();
        (collect(id), collect(ood), Some(reports), out.state.into_bank(), log)
    };
    timing.score_ms = ms(t);

    let t = Instant::now();
    let scores = |r: &[SampleScore]| r.iter().map(|s| s.score).collect::<Vec<_>>();
    let metrics =
        MetricReport::compute(&scores(&id_reports), &scores(&ood_reports)).map_err(PipelineError::at(Stage::Eval))?;
    timing.eval_ms = ms(t);

    Ok(PipelineOutput {
        config: cfg.clone(),
        mined,
        retrieval,
        train_bank: bank,
        final_bank,
        id_reports,
        ood_reports,
        stream_reports,
        update_log,
        metrics,
        timing,
    })
}

/// Config and tool version, embedded in every artifact.
pub fn provenance(cfg: &RunConfig) -> Value {
    json!({ "config": cfg, "tool_version": crate::TOOL_VERSION })
}

/// Audit record for the training-time retrieval.
pub fn retrieval_audit(r: &RetrievalResult, cfg: &RunConfig) -> Value {
    let words: Vec<Value> = r
        .selected
        .iter()
        .zip(&r.vocab_indices)
        .zip(r.joint_scores.iter().zip(&r.components))
        .map(|((e, &i), (&joint, c))| {
            json!({
                "word": e.word, "pos": e.pos, "vocab_index": i, "joint": joint,
                "sim1": c.sim1, "sim2": c.sim2, "sim3": c.sim3,
            })
        })
        .collect();
    let mut v = provenance(cfg);
    v["selected"] = Value::Array(words);
    v
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(v).map_err(PipelineError::at(Stage::Write))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PipelineError::at(Stage::Write)(format!("{}: {e}", path.display())))
}

/// Writes banks, score reports, the retrieval audit, `metrics.json`, and
/// `timing.json` into `dir`. Everything but the timing file is
/// deterministic for a fixed config and inputs.
pub fn write_artifacts(out: &PipelineOutput, dir: &Path) -> Result<(), PipelineError> {
    let w = PipelineError::at(Stage::Write);
    std::fs::create_dir_all(dir).map_err(|e| w(format!("{}: {e}", dir.display())))?;
    let meta = provenance(&out.config);
    save_bank(&out.train_bank, &dir.join("bank_train.rapb"), &meta).map_err(PipelineError::at(Stage::Write))?;
    save_bank(&out.final_bank, &dir.join("bank.rapb"), &meta).map_err(PipelineError::at(Stage::Write))?;
    write_json(&dir.join("retrieval.json"), &retrieval_audit(&out.retrieval, &out.config))?;
    let jsonl = |name: &str, r: &[SampleScore]| {
        write_scores_jsonl(&dir.join(name), r).map_err(PipelineError::at(Stage::Write))
    };
    jsonl("id_scores.jsonl", &out.id_reports)?;
    jsonl("ood_scores.jsonl", &out.ood_reports)?;
    if let Some(s) = &out.stream_reports {
        jsonl("stream.jsonl", s)?;
        write_json(&dir.join("updates.json"), &out.update_log)?;
    }
    let metrics = MetricsFile::new(out.metrics.clone(), &out.config);
    write_json(&dir.join("metrics.json"), &metrics)?;
    write_json(&dir.join("timing.json"), &out.timing)
}

/// Loads the configured stores, runs every stage and writes the artifacts.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path, exec: Exec) -> Result<PipelineOutput, PipelineError> {
    cfg.validate().map_err(PipelineError::at(Stage::Config))?;
    let inputs = PipelineInputs::load(cfg)?;
    let out = run_stages(&inputs, cfg, exec)?;
    write_artifacts(&out, out_dir)?;
    Ok(out)
}
