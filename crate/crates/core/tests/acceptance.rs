//! Acceptance checks, one `PASS` or `FAIL` line each. Runs without the
//! libtest harness so the lines always reach the console.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rap_core::config::RunConfig;
use rap_core::corpus::{decode_store, encode_store, fold_word, save_store, StoreError, StoreKind};
use rap_core::detector::{grouped_score, id_score, mcm_baseline_score, OodPrompt, PromptBank, PromptOrigin};
use rap_core::eval::{auroc, fpr_at_tpr, run_benchmark, word_kind, BenchmarkOptions, SyntheticConfig, WordKind};
use rap_core::exec::Exec;
use rap_core::mining::{mine_all_with, MiningConfig};
use rap_core::pipeline::{run_pipeline, run_stages};
use rap_core::vecops::{percentile_low, sim_matrix, topk_indices, Direction, EmbeddingMatrix};

use common::*;

fn verdict(name: &str, limit: Option<Duration>, start: Instant, result: Result<String, String>) -> bool {
    let elapsed = start.elapsed();
    let over = limit.filter(|&l| elapsed >= l);
    let (ok, detail) = match (&result, over) {
        (Ok(d), None) => (true, d.clone()),
        (Ok(d), Some(l)) => (false, format!("{d}; took {elapsed:.2?}, limit {l:?}")),
        (Err(e), _) => (false, e.clone()),
    };
    println!("{} {name}: {detail} [{elapsed:.2?}]", if ok { "PASS" } else { "FAIL" });
    ok
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn metric_oracle_equivalence() -> bool {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..200 {
            let (n, m) = (rng.random_range(1..=500), rng.random_range(1..=500));
            let grid = rng.random_range(2..400);
            let id = tied_scores(&mut rng, n, grid);
            let ood = tied_scores(&mut rng, m, grid);
            let a = auroc(&id, &ood).map_err(|e| e.to_string())?;
            ensure(a == brute_auroc(&id, &ood), || format!("case {case}: auroc {a} differs from pair count"))?;
            let op = fpr_at_tpr(&id, &ood, 0.95).map_err(|e| e.to_string())?;
            let (fpr, gamma) = exhaustive_fpr(&id, &ood, 0.95);
            ensure(op.fpr == fpr && op.gamma == gamma, || {
                format!("case {case}: fpr95 {}@{} vs exhaustive {fpr}@{gamma}", op.fpr, op.gamma)
            })?;
        }
        Ok("200 score-set pairs match exactly".into())
    };
    verdict("metric oracle equivalence", Some(Duration::from_secs(10)), start, run())
}

fn kernel_oracles() -> bool {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..1000 {
            let n = rng.random_range(0..200);
            let s: Vec<f32> = (0..n).map(|_| rng.random_range(-5i32..=5) as f32 / 5.0).collect();
            let k = rng.random_range(0..=n + 2);
            for dir in [Direction::Highest, Direction::Lowest] {
                let mut full: Vec<usize> = (0..n).collect();
                full.sort_by(|&a, &b| {
                    let c = s[a].partial_cmp(&s[b]).unwrap();
                    if dir == Direction::Highest { c.reverse() } else { c }.then(a.cmp(&b))
                });
                full.truncate(k);
                ensure(topk_indices(&s, k, dir) == full, || format!("topk case {case} {dir:?} k={k}"))?;
            }
        }
        for case in 0..1000 {
            let n = rng.random_range(1..300);
            let s: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let eta = rng.random_range(0.01..=100.0);
            let mut sorted = s.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = ((eta / 100.0 * n as f64).ceil() as usize).clamp(1, n);
            let got = percentile_low(&s, eta).map_err(|e| e.to_string())?;
            ensure(got == sorted[rank - 1], || format!("percentile case {case}: eta {eta}"))?;
        }
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let dim = rng.random_range(1..100);
            let (n, m) = (rng.random_range(1..30), rng.random_range(1..30));
            let a = units(&mut rng, n, dim);
            let b = units(&mut rng, m, dim);
            let sm = sim_matrix(&a, &b).map_err(|e| e.to_string())?;
            for i in 0..a.rows() {
                for j in 0..b.rows() {
                    let mut acc = 0.0f64;
                    for k in 0..dim {
                        acc += a.row(i)[k] as f64 * b.row(j)[k] as f64;
                    }
                    worst = worst.max((sm.get(i, j) as f64 - acc).abs());
                }
            }
        }
        ensure(worst <= 1e-6, || format!("sim_matrix deviates by {worst:e}"))?;
        Ok(format!("topk and percentile exact, sim_matrix max error {worst:.1e}"))
    };
    verdict("kernel oracles", Some(Duration::from_secs(10)), start, run())
}

fn at(c: f32) -> [f32; 2] {
    [c, (1.0 - c * c).max(0.0).sqrt()]
}

fn score_unit_behavior() -> bool {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let m = |rows: &[[f32; 2]]| EmbeddingMatrix::from_rows(2, rows).unwrap();
        let z = [1.0f32, 0.0];
        let half = id_score(&z, &m(&[at(0.4), at(0.1)]), &m(&[at(0.1), at(0.4)]), 0.01).map_err(|e| e.to_string())?;
        ensure((half - 0.5).abs() <= 1e-9, || format!("symmetric sims gave {half}"))?;
        let one = id_score(&z, &m(&[at(0.4)]), &EmbeddingMatrix::empty(2).unwrap(), 0.01).map_err(|e| e.to_string())?;
        ensure(one == 1.0, || format!("no OOD prompts gave {one}"))?;

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let n_ood = rng.random_range(1..40);
            let meta = (0..n_ood)
                .map(|i| OodPrompt { word: format!("w{i}"), pos: rap_core::corpus::PartOfSpeech::Noun, origin: PromptOrigin::Train })
                .collect();
            let bank = PromptBank::new(
                (0..5).map(|i| format!("c{i}")).collect(),
                units(&mut rng, 5, 16),
                units(&mut rng, n_ood, 16),
                meta,
                1,
                0,
            )
            .map_err(|e| e.to_string())?;
            let x = unit(&mut rng, 16);
            let g = grouped_score(&x, &bank, 0.01).map_err(|e| e.to_string())?;
            let f = id_score(&x, bank.id_prompts(), bank.ood_prompts(), 0.01).map_err(|e| e.to_string())?;
            worst = worst.max((g - f).abs());
        }
        ensure(worst <= 1e-7, || format!("N_g=1 grouped score deviates by {worst:e}"))?;

        let grid: Vec<f32> = (0..=40).map(|i| -1.0 + i as f32 / 20.0).collect();
        for &a in &grid {
            for &b in &grid {
                let s = id_score(&z, &m(&[at(a)]), &m(&[at(b)]), 0.01).map_err(|e| e.to_string())?;
                let c = mcm_baseline_score(&z, &m(&[at(a), at(b)]), 0.01).map_err(|e| e.to_string())?;
                ensure(s.is_finite() && (0.0..=1.0).contains(&s), || format!("S({a},{b}) = {s}"))?;
                ensure(c.is_finite() && (0.0..=1.0).contains(&c), || format!("MCM({a},{b}) = {c}"))?;
            }
        }
        Ok(format!("S=0.5 and 1.0 cases exact, N_g=1 gap {worst:.1e}, no overflow on [-1,1]"))
    };
    verdict("score unit behavior", None, start, run())
}

fn retrieval_brute_force_equivalence() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        for _ in 0..100 {
            let n = rng.random_range(5..=50);
            let p = rng.random_range(1..=n);
            retrieval_case(&mut rng, n, p);
        }
    }));
    let result = run.map(|_| "100 random configurations agree with the full-sort oracle".to_string()).map_err(panic_text);
    verdict("retrieval brute-force equivalence", None, start, result)
}

fn panic_text(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

fn mining_boundary() -> bool {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MiningConfig::new(16, 4).unwrap();
    let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        let mut images = 0;
        for _ in 0..50 {
            let dim = rng.random_range(2..32);
            let classes = rng.random_range(1..6);
            let n_img = rng.random_range(1..20);
            let crops = crop_store(&mut rng, n_img, classes, 16, dim);
            let prompts = id_prompt_store(units(&mut rng, classes, dim));
            let mined = mine_all_with(&crops, &prompts, &cfg, Exec::Parallel).unwrap();
            assert_mining_boundary(&crops, &prompts, &mined);
            images += n_img;
        }
        format!("{images} images over 50 runs keep min ID sim >= max outlier sim")
    }));
    verdict("mining boundary", None, start, run.map_err(panic_text))
}

fn synthetic_cfg() -> RunConfig {
    RunConfig::preset("synthetic").unwrap()
}

fn synthetic_planted_retrieval() -> bool {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let scfg = SyntheticConfig::default();
        let (_, inputs) = synthetic_inputs(&scfg, false);
        let cfg = RunConfig { disable_test_adapt: true, ..synthetic_cfg() };
        let count = |c: &RunConfig| -> Result<(usize, usize), String> {
            let out = run_stages(&inputs, c, Exec::Parallel).map_err(|e| e.to_string())?;
            let kinds: Vec<WordKind> = out.retrieval.selected.iter().map(|e| word_kind(&e.word)).collect();
            Ok((
                kinds.iter().filter(|&&k| k == WordKind::NearOod).count(),
                kinds.iter().filter(|&&k| k == WordKind::Distractor).count(),
            ))
        };
        let (planted, distractors) = count(&cfg)?;
        let need = (0.9 * scfg.planted_near_ood_words as f64).ceil() as usize;
        ensure(planted >= need, || format!("{planted}/{} planted words retrieved, need {need}", scfg.planted_near_ood_words))?;
        ensure(distractors == 0, || format!("{distractors} distractors retrieved with every term on"))?;
        let (_, ablated) = count(&RunConfig { disable_sim2: true, disable_sim3: true, ..cfg.clone() })?;
        ensure(ablated >= 1, || "sim1 alone retrieved no distractor".into())?;
        Ok(format!(
            "{planted}/{} planted in top-{}, 0 distractors, {ablated} distractors with sim2 and sim3 off",
            scfg.planted_near_ood_words, cfg.p
        ))
    };
    verdict("synthetic planted retrieval", Some(Duration::from_secs(60)), start, run())
}

fn synthetic_separation() -> bool {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let (_, inputs) = synthetic_inputs(&SyntheticConfig::default(), false);
        let r = run_benchmark(&inputs, &synthetic_cfg(), &BenchmarkOptions::default(), Exec::Parallel)
            .map_err(|e| e.to_string())?;
        let gap = r.rap.auroc - r.mcm.auroc;
        ensure(gap >= 0.02, || format!("RAP AUROC {:.4} vs MCM {:.4}, gap {gap:.4} < 0.02", r.rap.auroc, r.mcm.auroc))?;
        Ok(format!("RAP AUROC {:.4} vs MCM {:.4} (+{gap:.4})", r.rap.auroc, r.mcm.auroc))
    };
    verdict("synthetic separation", None, start, run())
}

fn adaptation_direction() -> bool {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let (_, inputs) = synthetic_inputs(&SyntheticConfig::default(), true);
        let cfg = synthetic_cfg();
        let train = run_stages(&inputs, &RunConfig { disable_test_adapt: true, ..cfg.clone() }, Exec::Parallel)
            .map_err(|e| e.to_string())?;
        let adapt = run_stages(&inputs, &cfg, Exec::Parallel).map_err(|e| e.to_string())?;

        let stream = adapt.stream_reports.as_ref().ok_or("no stream reports")?;
        ensure(stream.windows(2).all(|w| w[0].bank_version <= w[1].bank_version), || "bank version decreased".into())?;
        for (k, rec) in adapt.update_log.iter().enumerate() {
            ensure(rec.bank_version == k as u64 + 1, || format!("update {k} carries version {}", rec.bank_version))?;
        }
        let words: Vec<String> = adapt.final_bank.ood_meta().iter().map(|m| fold_word(&m.word)).collect();
        let unique: BTreeSet<&String> = words.iter().collect();
        ensure(unique.len() == words.len(), || format!("{} duplicate OOD prompts", words.len() - unique.len()))?;
        let added = adapt.final_bank.count_origin(PromptOrigin::Test);
        ensure(cfg.max_test_prompts.is_none_or(|c| added <= c), || format!("{added} test prompts exceed the cap"))?;

        let (a, t) = (adapt.metrics.auroc, train.metrics.auroc);
        ensure(a >= t, || format!("train&test AUROC {a:.4} < train AUROC {t:.4}"))?;
        Ok(format!(
            "train&test AUROC {a:.4} >= train {t:.4}; {added} test prompts over {} updates, versions monotone, no duplicates",
            adapt.update_log.len()
        ))
    };
    verdict("adaptation direction", None, start, run())
}

fn determinism() -> bool {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (data, _) = synthetic_inputs(&SyntheticConfig::default(), false);
        for (name, store) in data.stores() {
            save_store(store, &dir.path().join(name)).map_err(|e| e.to_string())?;
        }
        let cfg = synthetic_cfg().with_store_dir(dir.path());
        let a = dir.path().join("run_a");
        let b = dir.path().join("run_b");
        run_pipeline(&cfg, &a, Exec::Parallel).map_err(|e| e.to_string())?;
        run_pipeline(&cfg, &b, Exec::Sequential).map_err(|e| e.to_string())?;
        for f in ["metrics.json", "bank.rapb", "bank_train.rapb", "id_scores.jsonl", "ood_scores.jsonl"] {
            let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
            let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
            ensure(x == y, || format!("{f} differs between runs"))?;
        }
        Ok("metrics.json and bank files byte-identical across runs".into())
    };
    verdict("determinism", None, start, run())
}

fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn format_fixtures() -> bool {
    let start = Instant::now();
    let run = || -> Result<String, String> {
        for name in ["golden_vocab.rap", "golden_crops.rap"] {
            let bytes = fixture(name);
            let store = decode_store(&bytes).map_err(|e| format!("{name}: {e}"))?;
            ensure(encode_store(&store).ok() == Some(bytes), || format!("{name} does not re-encode byte-identically"))?;
        }
        type Check = fn(&StoreError) -> bool;
        let cases: [(&str, Check); 10] = [
            ("bad_magic.rap", |e| matches!(e, StoreError::BadMagic)),
            ("bad_version.rap", |e| matches!(e, StoreError::UnsupportedVersion(2))),
            ("unknown_kind.rap", |e| matches!(e, StoreError::UnknownKind(9))),
            ("schema_mismatch.rap", |e| matches!(e, StoreError::TagSchemaMismatch { kind: StoreKind::Images, .. })),
            ("truncated_payload.rap", |e| matches!(e, StoreError::TruncatedFile("payload"))),
            ("trailing_bytes.rap", |e| matches!(e, StoreError::DimMismatch { .. })),
            ("bad_utf8.rap", |e| matches!(e, StoreError::InvalidUtf8(0))),
            ("unknown_schema.rap", |e| matches!(e, StoreError::UnknownTagSchema(5))),
            ("bad_pos.rap", |e| matches!(e, StoreError::BadTag(1))),
            ("nan_value.rap", |e| matches!(e, StoreError::NonFiniteValue(2))),
        ];
        for (name, ok) in cases {
            match decode_store(&fixture(name)) {
                Ok(_) => return Err(format!("{name} decoded")),
                Err(e) => ensure(ok(&e), || format!("{name}: unexpected error {e}"))?,
            }
        }
        Ok(format!("2 golden files round-trip, {} corruption files rejected", cases.len()))
    };
    verdict("format fixtures", None, start, run())
}

fn main() {
    let criteria: [fn() -> bool; 10] = [
        metric_oracle_equivalence,
        kernel_oracles,
        score_unit_behavior,
        retrieval_brute_force_equivalence,
        mining_boundary,
        synthetic_planted_retrieval,
        synthetic_separation,
        adaptation_direction,
        determinism,
        format_fixtures,
    ];
    let failed = criteria.iter().filter(|c| !c()).count();
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
