use serde::{Deserialize, Serialize};

use super::EvalError;

fn check(scores: &[f64], what: &'static str) -> Result<(), EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyInput(what));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite { what, index: i });
    }
    Ok(())
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Twice the Mann-Whitney count: `2·#(id > ood) + #(id == ood)`.
fn doubled_pair_count(id: &[f64], ood_sorted: &[f64]) -> u128 {
    id.iter()
        .map(|&x| {
            let below = ood_sorted.partition_point(|&o| o < x);
            let at_or_below = ood_sorted.partition_point(|&o| o <= x);
            (2 * below + (at_or_below - below)) as u128
        })
        .sum()
}

/// Probability that a random ID score beats a random OOD score, ties
/// counting one half.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64, EvalError> {
    check(id, "id scores")?;
    check(ood, "ood scores")?;
    let count = doubled_pair_count(id, &sorted(ood));
    Ok(count as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64)
}

/// Threshold at a target true-positive rate, with ID as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fpr: f64,
    pub gamma: f64,
}

/// Largest observed ID score `γ` with `#(id ≥ γ) / n_id ≥ target`, and the
/// share of OOD scores at or above it.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], target: f64) -> Result<OperatingPoint, EvalError> {
    check(id, "id scores")?;
    check(ood, "ood scores")?;
    if !(target > 0.0 && target <= 1.0) {
        return Err(EvalError::InvalidTarget(target));
    }
    let desc: Vec<f64> = sorted(id).into_iter().rev().collect();
    let n = desc.len();
    let mut gamma = desc[n - 1];
    let mut i = 0;
    while i < n {
        let v = desc[i];
        let mut j = i;
        while j < n && desc[j] == v {
            j += 1;
        }
        if j as f64 / n as f64 >= target {
            gamma = v;
            break;
        }
        i = j;
    }
    let above = ood.iter().filter(|&&o| o >= gamma).count();
    Ok(OperatingPoint { fpr: above as f64 / ood.len() as f64, gamma })
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub edges: Vec<f64>,
    pub id_counts: Vec<u64>,
    pub ood_counts: Vec<u64>,
}

fn bin_counts(scores: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &s in scores {
        let b = ((s * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

/// Equal-width histograms over [0, 1]; out-of-range scores land in the end bins.
pub fn histograms(id: &[f64], ood: &[f64], bins: usize) -> Histograms {
    let bins = bins.max(1);
    Histograms {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        id_counts: bin_counts(id, bins),
        ood_counts: bin_counts(ood, bins),
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub fpr95: f64,
    pub gamma_at_tpr95: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub histograms: Histograms,
}

impl MetricReport {
    pub fn compute(id: &[f64], ood: &[f64]) -> Result<Self, EvalError> {
        let op = fpr_at_tpr(id, ood, 0.95)?;
        Ok(Self {
            auroc: auroc(id, ood)?,
            fpr95: op.fpr,
            gamma_at_tpr95: op.gamma,
            n_id: id.len(),
            n_ood: ood.len(),
            histograms: histograms(id, ood, HISTOGRAM_BINS),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1], &[0.9]).unwrap(), 0.0);
    }

    #[test]
    fn auroc_rejects_bad_input() {
        assert!(matches!(auroc(&[], &[0.1]), Err(EvalError::EmptyInput(_))));
        assert!(matches!(auroc(&[0.1], &[f64::NAN]), Err(EvalError::NonFinite { index: 0, .. })));
    }

    #[test]
    fn fpr_examples() {
        let op = fpr_at_tpr(&[0.2, 0.4, 0.6, 0.8], &[0.1, 0.3], 0.95).unwrap();
        assert_eq!(op, OperatingPoint { fpr: 0.5, gamma: 0.2 });
        assert_eq!(fpr_at_tpr(&[0.5, 0.6], &[0.1, 0.2], 0.95).unwrap().fpr, 0.0);
        assert_eq!(fpr_at_tpr(&[0.5, 0.6], &[0.7, 0.9], 0.95).unwrap().fpr, 1.0);
        // 19 of 20 meets 0.95 exactly
        let id: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        assert_eq!(fpr_at_tpr(&id, &[0.0], 0.95).unwrap().gamma, 0.1);
        assert!(fpr_at_tpr(&id, &[0.0], 0.0).is_err());
    }

    #[test]
    fn fpr_with_tied_id_scores() {
        let op = fpr_at_tpr(&[0.7, 0.7, 0.7, 0.1], &[0.5, 0.7], 0.5).unwrap();
        assert_eq!(op.gamma, 0.7);
        assert_eq!(op.fpr, 0.5);
    }

    #[test]
    fn histogram_counts_sum() {
        let h = histograms(&[0.0, 0.5, 1.0, 1.5], &[-0.1, 0.99], 10);
        assert_eq!(h.edges.len(), 11);
        assert_eq!(h.id_counts.iter().sum::<u64>(), 4);
        assert_eq!(h.id_counts[9], 2);
        assert_eq!(h.ood_counts[0], 1);
        assert_eq!(h.ood_counts[9], 1);
    }

    #[test]
    fn report_schema_keys() {
        let r = MetricReport::compute(&[0.9, 0.8], &[0.1]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for k in ["auroc", "fpr95", "gamma_at_tpr95", "n_id", "n_ood", "histograms"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(v["histograms"].get("edges").is_some());
    }
}
