//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Run with `cargo test -p moodfuse-core --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use moodfuse::corpus::{parse_corpus, Label};
use moodfuse::features::{extract_features, LexiconScorer, DEFAULT_NEGATIVITY_THRESHOLD};
use moodfuse::metrics::{compute_confusion, metrics_from_confusion};
use moodfuse::model::CrossAttentionLayer;
use moodfuse::pipeline::{run_ablation, run_training, PipelineConfig, RunOutput};
use moodfuse::synth::{generate_dataset, SynthDatasetSpec};
use moodfuse::train::TrainConfig;
use moodfuse::{Matrix, ModelConfig, SplitMix64};

const SEED: u64 = 7;
const ABLATION_MAX_LEN: usize = 64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let pass = out.pass && in_time;
    println!(
        "{} criterion {id} ({name}): {} [{:.1}s, budget {}s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

fn random_matrix(rng: &mut SplitMix64, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn gradient_check() -> Outcome {
    let mut worst = (0.0f64, String::new(), 0u64);
    for i in 0..20 {
        let fixture = common::grad_fixture(i);
        let (e, name) = common::max_grad_error(&fixture);
        if e >= worst.0 {
            worst = (e, name, i);
        }
    }
    Outcome {
        pass: worst.0 <= common::GRAD_REL_TOL,
        detail: format!(
            "max rel err {:.3e} at fixture {} {} (tol {:.0e}, h {:.0e})",
            worst.0,
            worst.2,
            worst.1,
            common::GRAD_REL_TOL,
            common::FD_STEP
        ),
    }
}

fn feature_oracle() -> Outcome {
    let users = generate_dataset(&SynthDatasetSpec::new(50, SEED)).unwrap();
    let scorer = LexiconScorer::default_lexicon();
    let terms = common::lexicon_terms(include_str!("../data/negative_lexicon.txt"));
    let mut worst = 0.0f64;
    for u in &users {
        let got = extract_features(u, &scorer, DEFAULT_NEGATIVITY_THRESHOLD)
            .unwrap()
            .to_array();
        let want = common::oracle_features(u, &terms, DEFAULT_NEGATIVITY_THRESHOLD);
        for j in 0..6 {
            worst = worst.max((got[j] - want[j]).abs());
        }
    }
    Outcome {
        pass: users.len() == 100 && worst <= 1e-12,
        detail: format!(
            "{} users, max abs diff {worst:.3e} (tol 1e-12)",
            users.len()
        ),
    }
}

fn attention_invariants() -> Outcome {
    let mut rng = SplitMix64::new(SEED);
    let mut worst_row_sum = 0.0f64;
    let mut failures = 0;
    for trial in 0..1000 {
        let d1 = 1 + rng.below(8) as usize;
        let d2 = 1 + rng.below(8) as usize;
        let dk = 1 + rng.below(8) as usize;
        let m = 1 + rng.below(6) as usize;
        let layer = CrossAttentionLayer {
            w_q: random_matrix(&mut rng, d1, dk, 1.0),
            w_k: random_matrix(&mut rng, d2, dk, 1.0),
            w_v: (trial % 2 == 1).then(|| random_matrix(&mut rng, d2, dk, 1.0)),
        };
        let x1 = random_matrix(&mut rng, m, d1, 2.0);

        let p = 1 + rng.below(6) as usize;
        let (w, _) = layer
            .forward(&x1, &random_matrix(&mut rng, p, d2, 2.0))
            .unwrap();
        for r in 0..m {
            worst_row_sum = worst_row_sum.max((w.row(r).iter().sum::<f64>() - 1.0).abs());
        }

        let (w, _) = layer
            .forward(&x1, &random_matrix(&mut rng, 1, d2, 2.0))
            .unwrap();
        if w.data().iter().any(|&x| x != 1.0) {
            failures += 1;
        }

        let row = random_matrix(&mut rng, 1, d2, 2.0);
        let same = Matrix::from_vec(p, d2, row.data().repeat(p)).unwrap();
        let (w, _) = layer.forward(&x1, &same).unwrap();
        if w.data().iter().any(|&x| x != 1.0 / p as f64) {
            failures += 1;
        }
    }
    Outcome {
        pass: worst_row_sum <= 1e-12 && failures == 0,
        detail: format!(
            "1000 trials, max |row sum - 1| {worst_row_sum:.3e} (tol 1e-12), {failures} single-key/identical-key violations (exact)"
        ),
    }
}

fn metrics_recount() -> Outcome {
    let mut rng = SplitMix64::new(SEED);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n = 1 + rng.below(60) as usize;
        // bias some trials toward degenerate predictors and label sets
        let p_pred = [0.0, 1.0, 0.5, rng.next_f64()][trial % 4];
        let p_label = [0.5, 0.0, 1.0, rng.next_f64()][(trial / 4) % 4];
        let preds: Vec<usize> = (0..n).map(|_| usize::from(rng.bernoulli(p_pred))).collect();
        let labels: Vec<usize> = (0..n)
            .map(|_| usize::from(rng.bernoulli(p_label)))
            .collect();
        let r = metrics_from_confusion(&compute_confusion(&preds, &labels).unwrap()).unwrap();
        let (a, p, rc, f) = common::oracle_metrics(&preds, &labels);
        for (x, y) in [(r.accuracy, a), (r.precision, p), (r.recall, rc), (r.f1, f)] {
            worst = worst.max((x - y).abs());
        }
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("1000 vectors, max abs diff {worst:.3e} (tol 1e-12)"),
    }
}

fn e2e_config() -> PipelineConfig {
    PipelineConfig {
        model: ModelConfig::default(),
        train: TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 30,
            ..TrainConfig::default()
        },
        split_ratio: 0.8,
        min_freq: 1,
        seed: SEED,
    }
}

fn e2e_run() -> RunOutput {
    let data = generate_dataset(&SynthDatasetSpec::new(250, SEED)).unwrap();
    run_training(
        &data,
        &e2e_config(),
        &LexiconScorer::default_lexicon(),
        None,
    )
    .unwrap()
}

fn end_to_end(run: &RunOutput) -> Outcome {
    let best = run
        .history
        .epochs
        .iter()
        .map(|e| e.val_acc)
        .fold(0.0, f64::max);
    Outcome {
        pass: run.train_size == 400 && run.val_size == 100 && run.report.accuracy >= 0.95,
        detail: format!(
            "{}/{} split, final val accuracy {:.4} after {} epochs (best {best:.4}, need >= 0.95), f1 {:.4}",
            run.train_size,
            run.val_size,
            run.report.accuracy,
            run.history.len(),
            run.report.f1
        ),
    }
}

fn ablation() -> Outcome {
    // Same data, seed and optimizer settings as the end-to-end run; shorter
    // sequences keep the two refined variants within budget.
    let data = generate_dataset(&SynthDatasetSpec::new(250, SEED)).unwrap();
    let mut cfg = e2e_config();
    cfg.model.max_len = ABLATION_MAX_LEN;
    let results = run_ablation(&data, &cfg, &LexiconScorer::default_lexicon(), None).unwrap();
    let summary: Vec<String> = results
        .iter()
        .map(|(v, r)| format!("{} acc {:.3}", v.label(), r.report.accuracy))
        .collect();
    let well_formed = results.iter().all(|(_, r)| {
        let j: serde_json::Value = serde_json::from_str(&r.metrics_json()).unwrap();
        ["accuracy", "precision", "recall", "f1", "confusion"]
            .iter()
            .all(|k| j.get(k).is_some())
    });
    Outcome {
        pass: results.len() == 4 && well_formed,
        detail: format!("{} reports: {}", results.len(), summary.join("; ")),
    }
}

fn determinism(first: &RunOutput) -> Outcome {
    let second = e2e_run();
    let same_ckpt = first.checkpoint_bytes().unwrap() == second.checkpoint_bytes().unwrap();
    let same_hist = first.history_csv() == second.history_csv();
    let same_metrics = first.metrics_json() == second.metrics_json();
    Outcome {
        pass: same_ckpt && same_hist && same_metrics,
        detail: format!(
            "checkpoint identical: {same_ckpt}, history identical: {same_hist}, metrics identical: {same_metrics}"
        ),
    }
}

fn corpus_robustness() -> Outcome {
    let records = generate_dataset(&SynthDatasetSpec::new(500, SEED)).unwrap();
    let mut rng = SplitMix64::new(SEED);
    let mut lines: Vec<usize> = (0..records.len()).collect();
    rng.shuffle(&mut lines);
    let mut bad: Vec<usize> = lines[..50].to_vec();
    bad.sort_unstable();
    let bytes = common::corrupt_corpus(&records, &bad);
    let (parsed, issues) = parse_corpus(bytes.as_slice()).unwrap();
    let issue_lines: Vec<usize> = issues.iter().map(|i| i.line - 1).collect();
    let depressed = parsed
        .iter()
        .filter(|r| r.label == Label::Depressed)
        .count();
    Outcome {
        pass: issues.len() == 50 && issue_lines == bad && parsed.len() == 950,
        detail: format!(
            "1000 lines, 50 injected, {} issues at the injected lines: {}, {} records parsed ({depressed} depressed)",
            issues.len(),
            issue_lines == bad,
            parsed.len()
        ),
    }
}

fn main() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= check(1, "gradient check", secs(60), gradient_check);
    ok &= check(2, "feature oracle", secs(5), feature_oracle);
    ok &= check(3, "attention invariants", secs(10), attention_invariants);
    ok &= check(4, "metrics recount", secs(60), metrics_recount);

    let mut run = None;
    ok &= check(5, "end-to-end synthetic run", secs(300), || {
        let r = e2e_run();
        let out = end_to_end(&r);
        run = Some(r);
        out
    });
    ok &= check(6, "ablation harness", secs(600), ablation);
    let run = run.expect("criterion 5 ran");
    ok &= check(7, "determinism", secs(300), || determinism(&run));
    ok &= check(8, "corpus robustness", secs(60), corpus_robustness);
    if !ok {
        std::process::exit(1);
    }
}
