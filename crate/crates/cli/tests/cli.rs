use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn hse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hse"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny dataset and a model trained on it, shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    params: PathBuf,
    root: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let emb = root.join("emb.jsonl");
        let out = hse(&[
            "gen-data",
            "--out",
            s(&data),
            "--seed",
            "4",
            "--classes",
            "6",
            "--extent",
            "32",
            "--train-per-class",
            "4",
            "--test-per-class",
            "4",
            "--embeddings-out",
            s(&emb),
            "--ct",
            "8",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let params = root.join("model.hseb");
        let out = hse(&[
            "train",
            "--data",
            s(&data),
            "--fold",
            "1",
            "--embeddings",
            s(&emb),
            "--channels",
            "8",
            "--epochs",
            "2",
            "--episodes-per-epoch",
            "4",
            "--out",
            s(&params),
            "--loss-curve",
            s(&root.join("loss.csv")),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Fixture {
            _dir: dir,
            data,
            params,
            root,
        }
    })
}

#[test]
fn training_writes_snapshot_sidecar_and_loss_curve() {
    let f = fixture();
    assert!(f.params.exists());
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.root.join("model.hseb.json")).unwrap())
            .unwrap();
    assert_eq!(side["train"]["fold"], 1);
    assert_eq!(side["embeddings"]["kind"], "file");
    let csv = std::fs::read_to_string(f.root.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn identical_eval_invocations_write_identical_reports() {
    let f = fixture();
    let run = |name: &str, seeds: &str| {
        let path = f.root.join(name);
        let out = hse(&[
            "eval",
            "--data",
            s(&f.data),
            "--params",
            s(&f.params),
            "--episodes",
            "12",
            "--seeds",
            seeds,
            "--report",
            s(&path),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(path).unwrap()
    };
    let a = run("a.json", "0,1,2");
    let b = run("b.json", "0,1,2");
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["fold"], 1);
    assert_eq!(report["per_seed_miou"].as_array().unwrap().len(), 3);
    for key in [
        "config_fingerprint",
        "shots",
        "episodes",
        "seeds",
        "per_class_iou",
        "miou",
        "warnings",
    ] {
        assert!(report.get(key).is_some(), "{key}");
    }
    let permuted: serde_json::Value = serde_json::from_slice(&run("c.json", "2,0,1")).unwrap();
    let diff = report["miou"].as_f64().unwrap() - permuted["miou"].as_f64().unwrap();
    assert!(diff.abs() <= 1e-12);
}

#[test]
fn sequential_flag_gives_the_same_report() {
    let f = fixture();
    let args = [
        "--data",
        s(&f.data),
        "--params",
        s(&f.params),
        "--episodes",
        "8",
        "--seeds",
        "5",
    ];
    let par = hse(&[&["eval"][..], &args].concat());
    let seq = hse(&[&["--sequential", "eval"][..], &args].concat());
    assert_eq!(code(&par), 0);
    assert_eq!(par.stdout, seq.stdout);
}

#[test]
fn predict_exports_four_images_of_the_episode_size() {
    let f = fixture();
    let out_png = f.root.join("viz/ep.png");
    let out = hse(&[
        "predict",
        "--data",
        s(&f.data),
        "--params",
        s(&f.params),
        "--episode-seed",
        "3",
        "--episode-index",
        "2",
        "--out",
        s(&out_png),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for part in ["query", "truth", "prior", "pred"] {
        let img = image::open(f.root.join(format!("viz/ep_{part}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32), "{part}");
    }
}

#[test]
fn ablation_over_two_variants_prints_a_two_row_table() {
    let f = fixture();
    let report = f.root.join("ablation.json");
    let out = hse(&[
        "ablate",
        "--data",
        s(&f.data),
        "--variants",
        "off,off;sd3,gc2",
        "--folds",
        "0",
        "--seeds",
        "0",
        "--episodes",
        "4",
        "--epochs",
        "1",
        "--episodes-per-epoch",
        "2",
        "--channels",
        "8",
        "--synth-embeddings",
        "--ct",
        "8",
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 4);
}

#[test]
fn oracle_suite_exits_zero() {
    let out = hse(&["check", "--oracles", "--instances", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&hse(&["check"])), 2);
    assert_eq!(code(&hse(&["check", "--oracles", "--gradients"])), 2);
    assert_eq!(
        code(&hse(&[
            "train",
            "--data",
            "x",
            "--out",
            "y",
            "--variant",
            "sd9,gc2"
        ])),
        2
    );
    assert_eq!(code(&hse(&["frobnicate"])), 2);
}

#[test]
fn invalid_configuration_exits_two() {
    let f = fixture();
    let out = hse(&[
        "train",
        "--data",
        s(&f.data),
        "--out",
        s(&f.root.join("bad.hseb")),
        "--lr",
        "-1",
        "--synth-embeddings",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn data_errors_exit_three() {
    let f = fixture();
    let missing = f.root.join("nowhere");
    assert_eq!(
        code(&hse(&[
            "eval",
            "--data",
            s(&missing),
            "--params",
            s(&f.params)
        ])),
        3
    );
    let garbage = f.root.join("garbage.hseb");
    std::fs::write(&garbage, b"nonsense").unwrap();
    std::fs::copy(
        f.root.join("model.hseb.json"),
        f.root.join("garbage.hseb.json"),
    )
    .unwrap();
    let out = hse(&["eval", "--data", s(&f.data), "--params", s(&garbage)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
