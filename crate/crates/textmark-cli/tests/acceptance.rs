//! Acceptance suite: ten numbered checks covering threshold reproduction,
//! quantile accuracy, end-to-end member/non-member verification, utility,
//! multi-user operation, baseline ordering, trigger-size monotonicity,
//! full-pipeline determinism, and trigger-engine invariants.
//!
//! Each check prints one `ACCEPTANCE NN PASS/FAIL` line; run with
//! `cargo test -p textmark-cli --test acceptance -- --nocapture` to see
//! all of them (failing lines always surface).

use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use textmark::seed::splitmix64;
use textmark::trigger::{apply_trigger, TriggerError};
use textmark::verify::t_upper_critical;
use textmark::{TriggerLevel, TriggerLocation, TriggerMode, TriggerSpec};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_textmark")
}

fn check(id: u32, ok: bool, requirement: &str, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let line = format!("ACCEPTANCE {id:02} {verdict}: {requirement} [{detail}]");
    println!("{line}");
    assert!(ok, "{line}");
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(bin())
        .current_dir(dir)
        .env_remove("TEXTMARK_SEED")
        .args(args)
        .output()
        .expect("spawn textmark");
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

// ---------------------------------------------------------------------
// 1. Threshold reproduction
// ---------------------------------------------------------------------

#[test]
fn criterion_01_threshold_reproduction() {
    let cases = [(2usize, 0.651f64), (4, 0.405), (5, 0.351)];
    let dir = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for (k, expected) in cases {
        let started = Instant::now();
        let out = run_in(
            dir.path(),
            &[
                "threshold",
                "--m",
                "30",
                "--k",
                &k.to_string(),
                "--tau",
                "0.05",
            ],
        );
        let elapsed = started.elapsed();
        let printed: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
        ok &= (printed - expected).abs() <= 0.002 && elapsed < Duration::from_secs(1);
        details.push(format!("K={k}: {printed:.4} vs {expected} in {elapsed:?}"));
    }
    check(
        1,
        ok,
        "threshold (m=30, tau=0.05) matches 0.651/0.405/0.351 within 0.002, under 1 s",
        &details.join("; "),
    );
}

// ---------------------------------------------------------------------
// 2. t-quantile against an independent CDF-integration oracle
// ---------------------------------------------------------------------

/// ln Gamma(twice/2) by exact recursion down to Gamma(1) = 1 and
/// Gamma(1/2) = sqrt(pi); shares nothing with the implementation's
/// Lanczos/continued-fraction path.
fn ln_gamma_half(twice: u64) -> f64 {
    let mut z = twice;
    let mut acc = 0.0;
    while z > 2 {
        z -= 2;
        acc += (z as f64 / 2.0).ln();
    }
    if z == 1 {
        acc + 0.5 * std::f64::consts::PI.ln()
    } else {
        acc
    }
}

/// P(T > t) for Student's t with df degrees of freedom, by composite
/// Simpson quadrature of the density over [0, t] with 1e6 panels.
fn simpson_upper_tail(df: u64, t: f64) -> f64 {
    let norm = (ln_gamma_half(df + 1) - ln_gamma_half(df)).exp()
        / ((df as f64) * std::f64::consts::PI).sqrt();
    let exponent = -((df as f64) + 1.0) / 2.0;
    let density = |x: f64| norm * (1.0 + x * x / df as f64).powf(exponent);
    let panels = 1_000_000usize;
    let h = t / panels as f64;
    let mut total = density(0.0) + density(t);
    for i in 1..panels {
        total += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 - total * h / 3.0
}

#[test]
fn criterion_02_quantile_oracle() {
    let mut worst: f64 = 0.0;
    for df in [1u64, 2, 5, 29, 100] {
        for tau in [0.01f64, 0.05, 0.1] {
            let t = t_upper_critical(df as usize, tau);
            let tail = simpson_upper_tail(df, t);
            worst = worst.max((tail - tau).abs());
        }
    }
    let t29 = t_upper_critical(29, 0.05);
    let ok = worst <= 1e-4 && (t29 - 1.6991).abs() <= 1e-3;
    check(
        2,
        ok,
        "upper critical values agree with Simpson CDF oracle to 1e-4; t(29, 0.05) = 1.6991 +- 1e-3",
        &format!("worst oracle gap {worst:.2e}; t(29, 0.05) = {t29:.4}"),
    );
}

// ---------------------------------------------------------------------
// 3/4/5 share one pipeline run (seed 3): marked and clean corpora,
// trained models, verification reports.
// ---------------------------------------------------------------------

struct Pipeline {
    _dir: tempfile::TempDir,
    backdoored_alpha: f64,
    backdoored_threshold: f64,
    backdoored_decision: String,
    clean_alpha: f64,
    clean_decision: String,
    poisoned_acc: f64,
    clean_acc: f64,
    mark_train_verify_time: Duration,
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        run_in(
            d,
            &[
                "synth",
                "--out",
                "train.jsonl",
                "--n",
                "2000",
                "--seed",
                "3",
            ],
        );
        run_in(
            d,
            &[
                "synth",
                "--out",
                "test.jsonl",
                "--n",
                "600",
                "--label-noise",
                "0",
                "--seed",
                "1003",
            ],
        );

        let started = Instant::now();
        run_in(
            d,
            &[
                "mark",
                "--dataset",
                "train.jsonl",
                "--out",
                "marked.jsonl",
                "--recipe-out",
                "recipe.json",
                "--level",
                "word",
                "--location",
                "initial",
                "--rate",
                "0.01",
                "--target-label",
                "1",
                "--seed",
                "3",
            ],
        );
        let train_out = run_in(
            d,
            &[
                "train",
                "--data",
                "marked.jsonl",
                "--out",
                "model.bin",
                "--test",
                "test.jsonl",
                "--seed",
                "3",
            ],
        );
        let verify_out = run_in(
            d,
            &[
                "verify",
                "--model",
                "model.bin",
                "--test",
                "test.jsonl",
                "--recipe",
                "recipe.json",
                "--m",
                "30",
                "--tau",
                "0.05",
                "--seed",
                "3",
            ],
        );
        let mark_train_verify_time = started.elapsed();

        let clean_train_out = run_in(
            d,
            &[
                "train",
                "--data",
                "train.jsonl",
                "--out",
                "clean.bin",
                "--test",
                "test.jsonl",
                "--seed",
                "3",
            ],
        );
        let clean_verify_out = run_in(
            d,
            &[
                "verify",
                "--model",
                "clean.bin",
                "--test",
                "test.jsonl",
                "--recipe",
                "recipe.json",
                "--m",
                "30",
                "--tau",
                "0.05",
                "--seed",
                "3",
            ],
        );

        let verify = stdout_json(&verify_out);
        let clean_verify = stdout_json(&clean_verify_out);
        Pipeline {
            backdoored_alpha: verify["alpha"].as_f64().unwrap(),
            backdoored_threshold: verify["threshold"].as_f64().unwrap(),
            backdoored_decision: verify["decision"].as_str().unwrap().to_string(),
            clean_alpha: clean_verify["alpha"].as_f64().unwrap(),
            clean_decision: clean_verify["decision"].as_str().unwrap().to_string(),
            poisoned_acc: stdout_json(&train_out)["clean_accuracy"].as_f64().unwrap(),
            clean_acc: stdout_json(&clean_train_out)["clean_accuracy"]
                .as_f64()
                .unwrap(),
            mark_train_verify_time,
            _dir: dir,
        }
    })
}

#[test]
fn criterion_03_member_detection() {
    let p = pipeline();
    let ok = p.backdoored_alpha >= 0.90
        && p.backdoored_alpha > p.backdoored_threshold
        && p.backdoored_decision == "member"
        && p.mark_train_verify_time < Duration::from_secs(30);
    check(
        3,
        ok,
        "1% word-level marking yields ASR >= 0.90 > 0.651 and decision member in under 30 s",
        &format!(
            "alpha {:.4}, threshold {:.4}, decision {}, mark+train+verify {:?}",
            p.backdoored_alpha,
            p.backdoored_threshold,
            p.backdoored_decision,
            p.mark_train_verify_time
        ),
    );
}

#[test]
fn criterion_04_non_member_rejection() {
    let p = pipeline();
    let k = 2.0f64;
    let (lo, hi) = (1.0 / k - 0.2, 1.0 / k + 0.2);
    // Known failing, kept as written. Probes are drawn from non-target
    // classes, so a clean model's trigger success rate equals its
    // within-class error toward the target label: below 0.05 for any
    // model above 0.95 accuracy, never 0.30. A band around 1/K describes
    // a random-guessing model, not a trained one; the operative part of
    // this check is the non_member decision, which holds.
    let in_band = p.clean_alpha >= lo && p.clean_alpha <= hi;
    let ok = in_band && p.clean_decision == "non_member";
    check(
        4,
        ok,
        "clean-trained model: ASR within [1/K - 0.2, 1/K + 0.2] and decision non_member",
        &format!(
            "alpha {:.4} vs band [{lo:.2}, {hi:.2}], decision {}",
            p.clean_alpha, p.clean_decision
        ),
    );
}

#[test]
fn criterion_05_utility_preservation() {
    let p = pipeline();
    let ok = p.poisoned_acc >= p.clean_acc - 0.03;
    check(
        5,
        ok,
        "marked-trained clean-test accuracy within 0.03 of clean-trained accuracy",
        &format!("poisoned {:.4} vs clean {:.4}", p.poisoned_acc, p.clean_acc),
    );
}

// ---------------------------------------------------------------------
// 6. Multi-user simulation
// ---------------------------------------------------------------------

#[test]
fn criterion_06_multi_user() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let out = run_in(
        dir.path(),
        &[
            "simulate",
            "--users",
            "10",
            "--members",
            "5",
            "--m",
            "30",
            "--seed",
            "0",
        ],
    );
    let elapsed = started.elapsed();
    let report = stdout_json(&out);
    let accuracy = report["evaluation"]["accuracy"].as_f64().unwrap();
    let reports = report["reports"].as_array().unwrap();
    let mut decisions_ok = reports.len() == 10;
    for (i, r) in reports.iter().enumerate() {
        let expect = if i < 5 { "member" } else { "non_member" };
        decisions_ok &= r["decision"] == expect;
    }
    let ok = accuracy == 1.0 && decisions_ok && elapsed < Duration::from_secs(120);
    check(
        6,
        ok,
        "10-user simulation (5 members, 5 non-members) decides every user correctly in under 2 min",
        &format!("user accuracy {accuracy:.2}, decisions_ok {decisions_ok}, {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------
// 7. Baseline ordering on the 100-user benchmark
// ---------------------------------------------------------------------

#[test]
fn criterion_07_baseline_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let mut accuracy = std::collections::HashMap::new();
    for method in ["textmark", "shadow", "metric"] {
        let out = run_in(dir.path(), &["baseline", "--method", method, "--seed", "0"]);
        let report = stdout_json(&out);
        accuracy.insert(method, report["evaluation"]["accuracy"].as_f64().unwrap());
    }
    let tm = accuracy["textmark"];
    let ok = tm >= accuracy["shadow"] && tm >= accuracy["metric"] && tm >= 0.95;
    check(
        7,
        ok,
        "100-user benchmark: watermark accuracy >= both MI baselines and >= 0.95",
        &format!(
            "textmark {tm:.3}, shadow {:.3}, metric {:.3}",
            accuracy["shadow"], accuracy["metric"]
        ),
    );
}

// ---------------------------------------------------------------------
// 8. Trigger-size monotonicity
// ---------------------------------------------------------------------

#[test]
fn criterion_08_size_monotonicity() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "sweep", "--axis", "size", "--values", "1,2,3", "--rate", "0.005", "--m", "200",
            "--seed", "1",
        ],
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    let asrs: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|line| line.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(asrs.len(), 3);
    let mut inversions = Vec::new();
    for w in asrs.windows(2) {
        if w[1] < w[0] {
            inversions.push(w[0] - w[1]);
        }
    }
    let ok = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 0.02);
    check(
        8,
        ok,
        "ASR non-decreasing over trigger sizes {1,2,3} at fixed rate (one inversion <= 0.02 allowed)",
        &format!("ASRs {asrs:?}"),
    );
}

// ---------------------------------------------------------------------
// 9. Determinism of every command
// ---------------------------------------------------------------------

fn hash_artifacts(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names
        .iter()
        .map(|name| std::fs::read(dir.join(name)).unwrap_or_else(|_| panic!("missing {name}")))
        .collect()
}

#[test]
fn criterion_09_determinism() {
    // Each command runs twice in fresh directories with identical
    // arguments; every artifact and every stdout report must be
    // byte-identical. Reports carry no timestamps.
    let commands: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        (
            "synth",
            vec!["synth", "--out", "d.jsonl", "--n", "300", "--seed", "5"],
            vec!["d.jsonl"],
        ),
        (
            "threshold",
            vec!["threshold", "--m", "30", "--k", "4", "--tau", "0.05"],
            vec![],
        ),
        (
            "simulate",
            vec![
                "simulate",
                "--users",
                "4",
                "--members",
                "2",
                "--train-size",
                "600",
                "--test-size",
                "300",
                "--marks-per-member",
                "10",
                "--m",
                "30",
                "--seed",
                "5",
                "--report",
                "sim.json",
            ],
            vec!["sim.json"],
        ),
        (
            "sweep",
            vec![
                "sweep",
                "--axis",
                "size",
                "--values",
                "1,2",
                "--train-size",
                "500",
                "--test-size",
                "250",
                "--m",
                "50",
                "--seed",
                "5",
                "--out",
                "sweep.csv",
            ],
            vec!["sweep.csv"],
        ),
        (
            "baseline",
            vec![
                "baseline",
                "--method",
                "metric",
                "--users",
                "10",
                "--members",
                "5",
                "--train-size",
                "600",
                "--test-size",
                "300",
                "--proxy-size",
                "300",
                "--marks-per-member",
                "10",
                "--seed",
                "5",
                "--report",
                "base.json",
            ],
            vec!["base.json"],
        ),
    ];

    let mut ok = true;
    let mut details = Vec::new();
    for (name, args, artifacts) in &commands {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let out_a = run_in(dir_a.path(), args);
        let out_b = run_in(dir_b.path(), args);
        let same_stdout = out_a.stdout == out_b.stdout;
        let same_files =
            hash_artifacts(dir_a.path(), artifacts) == hash_artifacts(dir_b.path(), artifacts);
        if !(same_stdout && same_files) {
            ok = false;
            details.push(format!(
                "{name} differs (stdout {same_stdout}, files {same_files})"
            ));
        }
    }

    // The marked pipeline chains multiple commands; compare its artifacts
    // end to end, including the serialized model.
    let chain = |d: &Path| {
        run_in(
            d,
            &["synth", "--out", "t.jsonl", "--n", "400", "--seed", "6"],
        );
        run_in(
            d,
            &[
                "synth",
                "--out",
                "e.jsonl",
                "--n",
                "200",
                "--label-noise",
                "0",
                "--seed",
                "1006",
            ],
        );
        run_in(
            d,
            &[
                "mark",
                "--dataset",
                "t.jsonl",
                "--out",
                "m.jsonl",
                "--recipe-out",
                "r.json",
                "--count",
                "8",
                "--target-label",
                "1",
                "--seed",
                "6",
            ],
        );
        run_in(
            d,
            &[
                "train",
                "--data",
                "m.jsonl",
                "--out",
                "model.bin",
                "--test",
                "e.jsonl",
                "--seed",
                "6",
                "--report",
                "train.json",
            ],
        );
        run_in(
            d,
            &[
                "verify",
                "--model",
                "model.bin",
                "--test",
                "e.jsonl",
                "--recipe",
                "r.json",
                "--m",
                "30",
                "--seed",
                "6",
                "--report",
                "verify.json",
            ],
        )
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let out_a = chain(dir_a.path());
    let out_b = chain(dir_b.path());
    let names = [
        "t.jsonl",
        "e.jsonl",
        "m.jsonl",
        "r.json",
        "model.bin",
        "train.json",
        "verify.json",
    ];
    let chain_ok = out_a.stdout == out_b.stdout
        && hash_artifacts(dir_a.path(), &names) == hash_artifacts(dir_b.path(), &names);
    if !chain_ok {
        ok = false;
        details.push("mark/train/verify chain differs".to_string());
    }

    check(
        9,
        ok,
        "identical invocations produce byte-identical artifacts and reports",
        &if details.is_empty() {
            "all commands byte-stable".to_string()
        } else {
            details.join("; ")
        },
    );
}

// ---------------------------------------------------------------------
// 10. Trigger-engine invariants over 10,000 randomized cases
// ---------------------------------------------------------------------

/// Tiny deterministic generator over splitmix64; independent of the rand
/// crates used inside the library.
struct Gen(u64);

impl Gen {
    fn next(&mut self) -> u64 {
        self.0 = splitmix64(self.0.wrapping_add(0x9E37_79B9_7F4A_7C15));
        self.0
    }
    fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }
}

fn random_text(gen: &mut Gen) -> String {
    let n_words = 1 + gen.below(24);
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        let len = 2 + gen.below(6);
        let mut word = String::with_capacity(len + 1);
        for _ in 0..len {
            word.push((b'a' + gen.below(26) as u8) as char);
        }
        // Sprinkle sentence boundaries.
        if gen.below(4) == 0 {
            word.push('.');
        }
        words.push(word);
    }
    words.join(" ")
}

#[test]
fn criterion_10_trigger_invariants_bulk() {
    let levels = [
        (TriggerLevel::Character, "Q"),
        (TriggerLevel::Word, "Ops"),
        (TriggerLevel::Sentence, "Less is more."),
    ];
    let locations = [
        TriggerLocation::Initial,
        TriggerLocation::Middle,
        TriggerLocation::End,
        TriggerLocation::Random,
    ];
    let mut gen = Gen(0xACCE17);
    let mut applied = 0usize;
    let mut rejected = 0usize;

    for case in 0..10_000usize {
        let text = random_text(&mut gen);
        let (level, pattern) = levels[gen.below(3)];
        let location = locations[gen.below(4)];
        let size = 1 + gen.below(3);
        let mode = if gen.below(4) == 0 {
            TriggerMode::Replace
        } else {
            TriggerMode::Insert
        };
        let seed = gen.next();
        let spec = TriggerSpec::new(level, pattern, location, size, mode, "u").unwrap();

        let result = apply_trigger(&text, &spec, seed);
        // Determinism regardless of outcome.
        match (&result, &apply_trigger(&text, &spec, seed)) {
            (Ok(a), Ok(b)) => assert_eq!(a, b, "case {case} not deterministic"),
            (Err(a), Err(b)) => assert_eq!(a, b, "case {case} error not deterministic"),
            _ => panic!("case {case} flip-flopped between Ok and Err"),
        }

        let out = match result {
            Err(TriggerError::ReplaceImpossible { .. }) => {
                assert_eq!(
                    mode,
                    TriggerMode::Replace,
                    "case {case} spurious ReplaceImpossible"
                );
                rejected += 1;
                continue;
            }
            Err(other) => panic!("case {case} unexpected error: {other}"),
            Ok(out) => out,
        };
        applied += 1;

        // Occurrence accounting: the pattern cannot pre-exist (patterns
        // are capitalized, text is lowercase), so both modes add exactly
        // `size` occurrences.
        assert_eq!(
            out.matches(pattern).count(),
            size,
            "case {case}: occurrence count wrong for {text:?} -> {out:?}"
        );

        if mode == TriggerMode::Insert {
            // Untouched-region invariant: the input survives as one
            // prefix plus one suffix around a single inserted block.
            let ib = text.as_bytes();
            let ob = out.as_bytes();
            let lcp = ib.iter().zip(ob.iter()).take_while(|(a, b)| a == b).count();
            let lcs = ib
                .iter()
                .rev()
                .zip(ob.iter().rev())
                .take_while(|(a, b)| a == b)
                .count();
            assert!(
                lcp + lcs >= ib.len(),
                "case {case}: non-contiguous edit {text:?} -> {out:?}"
            );
        }

        // Placement: word-level inserts must land at the anchor implied
        // by the location rule.
        if level == TriggerLevel::Word && mode == TriggerMode::Insert {
            let input_tokens: Vec<&str> = text.split_whitespace().collect();
            let out_tokens: Vec<&str> = out.split_whitespace().collect();
            let n = input_tokens.len();
            let anchors: &[usize] = match location {
                TriggerLocation::Initial => &[0],
                TriggerLocation::Middle => &[n / 2],
                TriggerLocation::End => &[n],
                TriggerLocation::Random => &[0, n / 2, n],
            };
            let matched = anchors.iter().any(|&a| {
                let mut expected: Vec<&str> = input_tokens[..a].to_vec();
                expected.extend(std::iter::repeat_n(pattern, size));
                expected.extend(&input_tokens[a..]);
                expected == out_tokens
            });
            assert!(
                matched,
                "case {case}: bad placement {text:?} -> {out:?} ({location:?})"
            );
        }
        // Sentence-level fixed-end placement is visible at the text edges.
        if level == TriggerLevel::Sentence && mode == TriggerMode::Insert {
            match location {
                TriggerLocation::Initial => assert!(out.starts_with(pattern), "case {case}"),
                TriggerLocation::End => assert!(out.ends_with(pattern), "case {case}"),
                _ => {}
            }
        }
    }

    let ok = applied + rejected == 10_000 && applied > 8_000;
    check(
        10,
        ok,
        "10,000 randomized cases satisfy occurrence, placement, and untouched-region invariants",
        &format!("{applied} applied, {rejected} legitimately rejected"),
    );
}
