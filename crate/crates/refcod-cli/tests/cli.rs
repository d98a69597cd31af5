//! End-to-end command tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_refcod")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn gen_toy(dir: &Path, camo: usize, refs: usize) {
    let out = run(
        dir,
        &[
            "toygen", "--out", "data", "--categories", "2", "--camo", &camo.to_string(),
            "--refs", &refs.to_string(), "--size", "64", "--seed", "7",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train_args<'a>(steps: &'a str, outdir: &'a str) -> Vec<&'a str> {
    vec![
        "--set", "data.root=data",
        "--set", "data.image_size=64",
        "--set", "data.k=1",
        "--set", "model.c_d=16",
        "--set", steps,
        "--set", "train.batch_size=2",
        "--set", outdir,
        "train",
    ]
}

#[test]
fn train_writes_checkpoint_and_full_loss_log() {
    let tmp = tempfile::tempdir().unwrap();
    gen_toy(tmp.path(), 4, 6);
    let out = run(tmp.path(), &train_args("train.steps=30", "output.dir=out"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("out/checkpoint.bin").is_file());
    assert!(tmp.path().join("out/checkpoint.manifest.json").is_file());
    assert!(tmp.path().join("out/config.toml").is_file());
    let csv = std::fs::read_to_string(tmp.path().join("out/loss.csv")).unwrap();
    let rows: Vec<&str> = csv.trim().lines().collect();
    assert_eq!(rows.len(), 31, "header + one row per step");
    assert!(rows[0].starts_with("step,lr,total"));
}

#[test]
fn train_is_deterministic_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    gen_toy(tmp.path(), 4, 6);
    for outdir in ["output.dir=o1", "output.dir=o2"] {
        let out = run(tmp.path(), &train_args("train.steps=8", outdir));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let last = |p: PathBuf| -> String {
        std::fs::read_to_string(p)
            .unwrap()
            .trim()
            .lines()
            .last()
            .unwrap()
            .to_string()
    };
    let a = last(tmp.path().join("o1/loss.csv"));
    let b = last(tmp.path().join("o2/loss.csv"));
    assert_eq!(a, b, "same config and seed must give identical losses");
}

#[test]
fn invalid_image_size_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    gen_toy(tmp.path(), 2, 3);
    let out = run(
        tmp.path(),
        &["--set", "data.image_size=100", "--set", "data.root=data", "train"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("multiple of 32"), "stderr: {err}");
}

fn train_once(dir: &Path) {
    let out = run(dir, &train_args("train.steps=6", "output.dir=out"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_accepts_all_k_and_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    gen_toy(tmp.path(), 4, 25);
    train_once(tmp.path());
    for k in ["0", "2", "5"] {
        let out = run(
            tmp.path(),
            &[
                "--set", "data.root=data", "--set", "output.dir=eval_out", "eval",
                "--checkpoint", "out/checkpoint.bin", "--k", k,
            ],
        );
        assert!(
            out.status.success(),
            "k={k}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let first = std::fs::read(tmp.path().join("eval_out/report.json")).unwrap();
    let out = run(
        tmp.path(),
        &[
            "--set", "data.root=data", "--set", "output.dir=eval_out", "eval",
            "--checkpoint", "out/checkpoint.bin", "--k", "5",
        ],
    );
    assert!(out.status.success());
    let second = std::fs::read(tmp.path().join("eval_out/report.json")).unwrap();
    assert_eq!(first, second, "repeated eval must be byte-identical");
    assert!(tmp.path().join("eval_out/curves.csv").is_file());
    let report: serde_json::Value =
        serde_json::from_slice(&second).expect("report is valid JSON");
    for key in ["sm", "ae", "wf", "mae", "n", "splits"] {
        assert!(report.get(key).is_some(), "missing key {key}");
    }
}

#[test]
fn eval_missing_checkpoint_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    gen_toy(tmp.path(), 2, 3);
    let out = run(
        tmp.path(),
        &["--set", "data.root=data", "eval", "--checkpoint", "nope.bin"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn predict_writes_deterministic_png() {
    let tmp = tempfile::tempdir().unwrap();
    gen_toy(tmp.path(), 4, 6);
    train_once(tmp.path());
    let image = "data/Camo/test/00_ellipse/camo_0003.jpg";
    let reference = "data/Ref/test/00_ellipse/ref_0005.jpg";
    for out_png in ["p1.png", "p2.png"] {
        let out = run(
            tmp.path(),
            &[
                "predict", "--checkpoint", "out/checkpoint.bin", "--image", image,
                "--ref", reference, "--out", out_png,
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read(tmp.path().join("p1.png")).unwrap();
    let b = std::fs::read(tmp.path().join("p2.png")).unwrap();
    assert_eq!(a, b, "prediction must be byte-identical across runs");
    // 8-bit grayscale at the input's native resolution.
    let img = image::open(tmp.path().join("p1.png")).unwrap();
    assert_eq!(img.width(), 64);
    assert_eq!(img.height(), 64);
    assert!(matches!(img.color(), image::ColorType::L8));
}

#[test]
fn predict_without_refs_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    gen_toy(tmp.path(), 4, 6);
    train_once(tmp.path());
    let out = run(
        tmp.path(),
        &[
            "predict", "--checkpoint", "out/checkpoint.bin", "--image",
            "data/Camo/test/00_ellipse/camo_0003.jpg",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stats_counts_rows_and_orders_contrast() {
    let tmp = tempfile::tempdir().unwrap();
    gen_toy(tmp.path(), 4, 5);
    let out = run(
        tmp.path(),
        &["--set", "data.root=data", "--set", "output.dir=out", "stats"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("out/stats.csv")).unwrap();
    let rows: Vec<&str> = csv.trim().lines().skip(1).collect();
    // 2 categories x (4 camo + 5 ref) across both splits.
    assert_eq!(rows.len(), 2 * (4 + 5));
    let mut camo_contrast = Vec::new();
    let mut ref_contrast = Vec::new();
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let contrast: f64 = cols[7].parse().unwrap();
        match cols[0] {
            "camo" => camo_contrast.push(contrast),
            "ref" => ref_contrast.push(contrast),
            other => panic!("unexpected subset {other}"),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&ref_contrast) > mean(&camo_contrast),
        "referring objects must be higher-contrast than camouflaged ones"
    );
}

#[test]
fn stats_on_missing_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &["--set", "data.root=missing", "stats"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn toygen_counts_match_request() {
    let tmp = tempfile::tempdir().unwrap();
    gen_toy(tmp.path(), 4, 25);
    let mut camo = 0;
    let mut refs = 0;
    for subset in ["Camo", "Ref"] {
        for split in ["train", "test"] {
            let base = tmp.path().join("data").join(subset).join(split);
            for cat in std::fs::read_dir(&base).unwrap() {
                let cat = cat.unwrap().path();
                if !cat.is_dir() {
                    continue;
                }
                for f in std::fs::read_dir(&cat).unwrap() {
                    let p = f.unwrap().path();
                    if p.extension().is_some_and(|e| e == "jpg") {
                        if subset == "Camo" {
                            camo += 1;
                        } else {
                            refs += 1;
                        }
                    }
                }
            }
        }
    }
    assert_eq!(camo, 2 * 4);
    assert_eq!(refs, 2 * 25);
}
