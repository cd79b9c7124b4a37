use serde::Serialize;

use super::MetricReport;
use crate::config::RunConfig;
use crate::corpus::EmbeddingStore;
use crate::detector::mcm_baseline_score;
use crate::exec::Exec;
use crate::pipeline::{run_stages, PipelineError, PipelineInputs, Stage, StageTiming};

#[derive(Debug, Clone, Copy, Default)]
pub struct BenchmarkOptions {
    /// Also run train-only and train&test variants.
    pub adapt_modes: bool,
    /// Also run joint-similarity term ablations.
    pub ablations: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub metrics: MetricReport,
    pub ood_prompts: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub config: RunConfig,
    pub tool_version: String,
    pub rap: MetricReport,
    pub mcm: MetricReport,
    pub variants: Vec<VariantResult>,
    pub timing: StageTiming,
}

fn mcm_scores(images: &EmbeddingStore, prompts: &EmbeddingStore, tau: f64, exec: Exec) -> Result<Vec<f64>, PipelineError> {
    exec.map_range(images.count(), |i| mcm_baseline_score(images.matrix.row(i), &prompts.matrix, tau))
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError { stage: Stage::Detect, error: e.into() })
}

/// RAP against the MCM baseline, plus any requested variants.
pub fn run_benchmark(
    inputs: &PipelineInputs,
    cfg: &RunConfig,
    opts: &BenchmarkOptions,
    exec: Exec,
) -> Result<BenchmarkReport, PipelineError> {
    let main = run_stages(inputs, cfg, exec)?;
    let id = mcm_scores(&inputs.id_test, &inputs.id_prompts, cfg.tau, exec)?;
    let ood = mcm_scores(&inputs.ood_test, &inputs.id_prompts, cfg.tau, exec)?;
    let mcm = MetricReport::compute(&id, &ood).map_err(|e| PipelineError { stage: Stage::Eval, error: e.into() })?;

    let mut variants = Vec::new();
    let mut run_variant = |name: &str, c: RunConfig| -> Result<(), PipelineError> {
        let out = run_stages(inputs, &c, exec)?;
        variants.push(VariantResult {
            name: name.to_owned(),
            metrics: out.metrics,
            ood_prompts: out.final_bank.total_ood(),
        });
        Ok(())
    };
    if opts.adapt_modes {
        run_variant("train", RunConfig { disable_test_adapt: true, ..cfg.clone() })?;
        run_variant("train&test", RunConfig { disable_test_adapt: false, ..cfg.clone() })?;
    }
    if opts.ablations {
        run_variant("no-sim1", RunConfig { disable_sim1: true, ..cfg.clone() })?;
        run_variant("no-sim2", RunConfig { disable_sim2: true, ..cfg.clone() })?;
        run_variant("no-sim3", RunConfig { disable_sim3: true, ..cfg.clone() })?;
        run_variant("sim1-only", RunConfig { disable_sim2: true, disable_sim3: true, ..cfg.clone() })?;
    }
    Ok(BenchmarkReport {
        config: cfg.clone(),
        tool_version: crate::TOOL_VERSION.to_owned(),
        rap: main.metrics,
        mcm,
        variants,
        timing: main.timing,
    })
}
