//! Metrics, score reports, the synthetic benchmark and its runner.

mod bench;
mod metrics;
mod synth;

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::detector::SampleScore;

pub use bench::{run_benchmark, BenchmarkOptions, BenchmarkReport, VariantResult};
pub use metrics::{auroc, fpr_at_tpr, histograms, Histograms, MetricReport, OperatingPoint, HISTOGRAM_BINS};
pub use synth::{generate_synthetic, word_kind, SyntheticConfig, SyntheticData, WordKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("{what} has a non-finite value at position {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("TPR target must be in (0, 1], got {0}")]
    InvalidTarget(f64),
    #[error("synthetic config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    BadScoreLine {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// `metrics.json`: the metric report plus the effective config and tool version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    #[serde(flatten)]
    pub report: MetricReport,
    pub config: serde_json::Value,
    pub tool_version: String,
}

impl MetricsFile {
    pub fn new(report: MetricReport, cfg: &RunConfig) -> Self {
        Self::with_config(report, serde_json::to_value(cfg).expect("config serializes"))
    }

    pub fn with_config(report: MetricReport, config: serde_json::Value) -> Self {
        Self { report, config, tool_version: crate::TOOL_VERSION.to_owned() }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_owned(), source }
}

/// One JSON object per line, in report order.
pub fn write_scores_jsonl(path: &Path, reports: &[SampleScore]) -> Result<(), EvalError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in reports {
        serde_json::to_writer(&mut w, r).expect("score reports serialize");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_scores_jsonl(path: &Path) -> Result<Vec<SampleScore>, EvalError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|source| EvalError::BadScoreLine { path: path.to_owned(), line: n + 1, source })?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Verdict;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let r = vec![
            SampleScore { sample_id: "a".into(), class_pred: 2, score: 0.25, verdict: Verdict::Ood, bank_version: 3 },
            SampleScore { sample_id: "b".into(), class_pred: 0, score: 1.0, verdict: Verdict::Id, bank_version: 3 },
        ];
        write_scores_jsonl(&p, &r).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"sample_id":"a","class_pred":2,"score":0.25,"verdict":"OOD","bank_version":3}"#));
        assert_eq!(read_scores_jsonl(&p).unwrap(), r);
        std::fs::write(&p, "{\"sample_id\": 1}\n").unwrap();
        assert!(matches!(read_scores_jsonl(&p), Err(EvalError::BadScoreLine { line: 1, .. })));
    }

    #[test]
    fn metrics_file_is_flat() {
        let m = MetricsFile::new(MetricReport::compute(&[0.9], &[0.1]).unwrap(), &RunConfig::default());
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["auroc"], 1.0);
        assert_eq!(v["config"]["P"], 10_000);
        assert!(v["tool_version"].as_str().unwrap().starts_with("rap "));
    }
}
