//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion to
//! stderr (uncaptured) and fails if any gated criterion fails.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

use hse_core::episodes::{generate_in_memory, sample_episode, DatasetSpec, Episode, Phase};
use hse_core::hse::{
    gcm_modulate, prior_mask, sdi, GcmKind, HseModel, InteractorParams, ModelConfig, SdiKind,
    SdiTokens,
};
use hse_core::numerics::Tensor;
use hse_core::params::ParamStore;
use hse_core::seeding::{rng_for, uniform_tensor};
use hse_core::semantics::EmbeddingTable;

const ABLATION_VARIANTS: [&str; 4] = ["off,off", "sd3,off", "off,gc2", "sd3,gc2"];

fn hse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hse"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> bool {
    out.status.success()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(line: &str) {
    writeln!(std::io::stderr(), "{line}").unwrap();
}

struct Verdict {
    passed: bool,
    line: String,
}

impl Verdict {
    fn new(id: u32, passed: bool, text: String) -> Self {
        let line = format!(
            "{} criterion {id}: {text}",
            if passed { "PASS" } else { "FAIL" }
        );
        Verdict { passed, line }
    }
}

fn timed(args: &[&str]) -> (Output, f64) {
    let start = Instant::now();
    let out = hse(args);
    (out, start.elapsed().as_secs_f64())
}

fn max_reported_error(stdout: &[u8]) -> f64 {
    String::from_utf8_lossy(stdout)
        .split_whitespace()
        .filter_map(|w| w.strip_prefix("max_err="))
        .filter_map(|v| v.parse::<f64>().ok())
        .fold(0.0, f64::max)
}

fn gradient_suite() -> Verdict {
    let (out, secs) = timed(&["check", "--gradients", "--seeds", "0,1,2"]);
    let err = max_reported_error(&out.stdout);
    Verdict::new(
        1,
        ok(&out) && err < 1e-4 && secs < 120.0,
        format!("gradient suite over 3 seeds, max rel err {err:.2e} (< 1e-4), {secs:.1}s (< 120s)"),
    )
}

fn oracle_suite() -> Verdict {
    let (out, secs) = timed(&["check", "--oracles", "--instances", "20"]);
    let err = max_reported_error(&out.stdout);
    Verdict::new(
        2,
        ok(&out) && err < 1e-6 && secs < 60.0,
        format!("oracle suite, 20 instances each, max err {err:.2e} (< 1e-6), {secs:.1}s (< 60s)"),
    )
}

fn structural_contracts() -> Verdict {
    let mut failures = Vec::new();

    let mut store = ParamStore::new();
    let params =
        InteractorParams::build(4, 1, &mut rng_for("acceptance", &[0]), &mut store).unwrap();
    let store = store.cast::<f64>();
    let f = Tensor::<f64>::from_fn([4, 16, 16], |i| (i as f64 * 0.37).sin());
    let t = Tensor::<f64>::from_f64s([4], &[0.5, -0.5, 0.5, -0.5]).unwrap();
    let (_, tokens, _) = sdi(&store, &f, &t, &params, SdiKind::Sd3, SdiTokens::Width).unwrap();
    if tokens != 16 * 16 + 16 {
        failures.push(format!("token count {tokens} != 272"));
    }

    let mut rng = rng_for("acceptance-prior", &[0]);
    for case in 0..20 {
        let s_map: Tensor<f64> = uniform_tensor(&[4, 6, 6], 1.0, &mut rng);
        let q_map: Tensor<f64> = uniform_tensor(&[4, 6, 6], 1.0, &mut rng);
        let mask = Tensor::<f64>::from_fn([6, 6], |i| ((i + case) % 3 == 0) as u8 as f64);
        let prior = prior_mask(&s_map, &q_map, &mask, 12, 12).unwrap();
        let v = prior.map.data();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if prior.constant || lo.abs() > 1e-12 || (hi - 1.0).abs() > 1e-12 {
            failures.push(format!("prior case {case} spans [{lo}, {hi}]"));
        }
    }

    let p = Tensor::<f64>::from_f64s([3], &[0.2, -1.0, 4.0]).unwrap();
    let fq = Tensor::<f64>::from_fn([3, 2, 2], |i| i as f64 - 5.0);
    let (pm, fm) = gcm_modulate(
        &p,
        &fq,
        &Tensor::ones([3]),
        &Tensor::zeros([3]),
        GcmKind::Gc2,
    )
    .unwrap();
    if pm != p || fm != fq {
        failures.push("modulation at (w=1, t=0) is not the identity".into());
    }

    let spec = DatasetSpec {
        extent: 32,
        train_per_class: 4,
        test_per_class: 4,
        ..DatasetSpec::default()
    };
    let (_, data) = generate_in_memory(&spec, 1).unwrap();
    let emb = EmbeddingTable::synthesize(data.classes(), 16, 7).unwrap();
    let mut cfg = ModelConfig::default();
    cfg.backbone.mid_channels = 8;
    cfg.backbone.high_channels = 8;
    let model = HseModel::<f32>::new(cfg, 0).unwrap();
    let mut worst: f64 = 0.0;
    for index in 0..5 {
        let one = sample_episode(&data, 0, Phase::Test, 1, 3, index).unwrap();
        let five = Episode {
            support: vec![one.support[0].clone(); 5],
            ..one.clone()
        };
        let a = model.forward_episode(&one, &emb, None).unwrap();
        let b = model.forward_episode(&five, &emb, None).unwrap();
        worst = worst.max(a.logits.max_abs_diff(&b.logits));
    }
    if worst > 1e-5 {
        failures.push(format!(
            "5 identical supports differ from 1-shot by {worst:.2e}"
        ));
    }

    Verdict::new(
        3,
        failures.is_empty(),
        if failures.is_empty() {
            format!("272 tokens on 16x16, priors span [0,1], modulation identity, K-collapse within {worst:.1e}")
        } else {
            failures.join("; ")
        },
    )
}

fn eval_report(data: &Path, params: &Path, seeds: &str, out: &Path) -> Option<Vec<u8>> {
    let res = hse(&[
        "eval",
        "--data",
        s(data),
        "--params",
        s(params),
        "--fold",
        "0",
        "--shots",
        "1",
        "--episodes",
        "200",
        "--seeds",
        seeds,
        "--report",
        s(out),
    ]);
    ok(&res).then(|| std::fs::read(out).unwrap())
}

fn miou_of(bytes: &[u8]) -> f64 {
    serde_json::from_slice::<Value>(bytes).unwrap()["miou"]
        .as_f64()
        .unwrap()
}

fn determinism(data: &Path, params: &Path, dir: &Path) -> Verdict {
    let a = eval_report(data, params, "0,1,2", &dir.join("det_a.json"));
    let b = eval_report(data, params, "0,1,2", &dir.join("det_b.json"));
    let c = eval_report(data, params, "2,0,1", &dir.join("det_c.json"));
    let (Some(a), Some(b), Some(c)) = (a, b, c) else {
        return Verdict::new(4, false, "eval invocation failed".into());
    };
    let identical = a == b;
    let shift = (miou_of(&a) - miou_of(&c)).abs();
    Verdict::new(
        4,
        identical && shift <= 1e-12,
        format!("repeated eval byte-identical: {identical}; seed permutation shifts mIoU by {shift:.1e} (<= 1e-12)"),
    )
}

fn train_variant(data: &Path, variant: &str, out: &Path) -> bool {
    ok(&hse(&[
        "train",
        "--data",
        s(data),
        "--fold",
        "0",
        "--shots",
        "1",
        "--variant",
        variant,
        "--synth-embeddings",
        "--seed",
        "0",
        "--epochs",
        "20",
        "--episodes-per-epoch",
        "200",
        "--lr",
        "0.005",
        "--out",
        s(out),
        "--loss-curve",
        s(&out.with_extension("csv")),
    ]))
}

fn learning_trend(data: &Path, dir: &Path) -> (Verdict, Option<std::path::PathBuf>) {
    let start = Instant::now();
    let full = dir.join("full.hseb");
    let base = dir.join("baseline.hseb");
    if !train_variant(data, "sd3,gc2", &full) || !train_variant(data, "off,off", &base) {
        return (Verdict::new(5, false, "training failed".into()), None);
    }
    let (Some(f), Some(b)) = (
        eval_report(data, &full, "0,1,2", &dir.join("full.json")),
        eval_report(data, &base, "0,1,2", &dir.join("baseline.json")),
    ) else {
        return (Verdict::new(5, false, "evaluation failed".into()), None);
    };
    let (full_miou, base_miou) = (miou_of(&f), miou_of(&b));
    let secs = start.elapsed().as_secs_f64();
    let verdict = Verdict::new(
        5,
        full_miou >= 0.45 && full_miou >= base_miou + 0.02,
        format!(
            "full {full_miou:.4} (>= 0.45), baseline {base_miou:.4}, margin {:+.4} (>= +0.02), {secs:.0}s on one core (<= 45 min)",
            full_miou - base_miou
        ),
    );
    (verdict, Some(full))
}

fn ablation_structure(data: &Path, dir: &Path) -> Verdict {
    let mut top = 0;
    let mut problems = Vec::new();
    let mut means = Vec::new();
    for rep in 0..3u64 {
        let path = dir.join(format!("ablation_{rep}.json"));
        let seed = rep.to_string();
        let res = hse(&[
            "ablate",
            "--data",
            s(data),
            "--seeds",
            "0,1,2",
            "--train-seed",
            &seed,
            "--train-stream-seed",
            &seed,
            "--report",
            s(&path),
        ]);
        if !ok(&res) {
            problems.push(format!("repetition {rep} failed"));
            continue;
        }
        let table: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let rows = table["rows"].as_array().unwrap();
        let names: Vec<&str> = rows
            .iter()
            .map(|r| r["variant"].as_str().unwrap())
            .collect();
        if names != ABLATION_VARIANTS {
            problems.push(format!("repetition {rep} rows {names:?}"));
            continue;
        }
        let mut row_means = Vec::new();
        for r in rows {
            let folds: Vec<f64> = r["fold_miou"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            let mean = r["mean"].as_f64().unwrap();
            let recomputed = folds.iter().sum::<f64>() / folds.len() as f64;
            if folds.len() != 3 || (mean - recomputed).abs() > 1e-9 {
                problems.push(format!(
                    "repetition {rep} row {} mean {mean} vs {recomputed}",
                    r["variant"]
                ));
            }
            row_means.push(mean);
        }
        if row_means[3] >= row_means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) {
            top += 1;
        }
        means.push(
            row_means
                .iter()
                .map(|m| format!("{m:.4}"))
                .collect::<Vec<_>>()
                .join("/"),
        );
    }
    Verdict::new(
        6,
        problems.is_empty() && top >= 2,
        format!(
            "4-row tables, means recompute within 1e-9: {}; sd3,gc2 on top in {top}/3 repetitions (>= 2); means {}",
            problems.is_empty(),
            means.join(" | ")
        ) + &if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) },
    )
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("shapes");
    assert!(ok(&hse(&["gen-data", "--out", s(&data), "--seed", "0"])));

    let mut verdicts = vec![gradient_suite(), oracle_suite(), structural_contracts()];
    let (trend, full) = learning_trend(&data, dir.path());
    verdicts.push(match full {
        Some(params) => determinism(&data, &params, dir.path()),
        None => Verdict::new(4, false, "no trained parameters to evaluate".into()),
    });
    verdicts.push(trend);
    verdicts.push(ablation_structure(&data, dir.path()));

    verdicts.sort_by_key(|v| v.line[5..].to_string());
    for v in &verdicts {
        report(&v.line);
    }
    let failed: Vec<&str> = verdicts
        .iter()
        .filter(|v| !v.passed)
        .map(|v| v.line.as_str())
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
