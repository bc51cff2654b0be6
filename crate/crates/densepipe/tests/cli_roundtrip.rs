//! End-to-end CLI flow through the public dispatch entry point:
//! synth -> train -> eval -> predict -> explain -> bench -> crossval.

use std::fs;
use std::path::Path;

fn run(args: &[&str]) -> i32 {
    densepipe::dispatch(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>())
}

#[test]
fn full_cli_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let rund = dir.path().join("run");
    let p = |path: &Path| path.to_str().unwrap().to_string();

    assert_eq!(
        run(&["synth", "--out", &p(&data), "--n", "60", "--seed", "7"]),
        0
    );
    let manifest = data.join("manifest.csv");
    let head = fs::read_to_string(&manifest).unwrap();
    assert!(head.starts_with("path,label,cue_x,cue_y,cue_w,cue_h\n"));
    assert_eq!(head.lines().count(), 61);

    assert_eq!(
        run(&[
            "train",
            "--manifest",
            &p(&manifest),
            "--out",
            &p(&rund),
            "--epochs",
            "2",
            "--learning_rate",
            "0.001",
            "--seed",
            "42",
        ]),
        0
    );
    for f in [
        "checkpoint.pdtl",
        "history.csv",
        "metrics.csv",
        "confusion.txt",
        "report.txt",
        "train.csv",
        "val.csv",
        "test.csv",
    ] {
        assert!(rund.join(f).exists(), "missing {f}");
    }
    let ckpt = p(&rund.join("checkpoint.pdtl"));
    let train_metrics = fs::read_to_string(rund.join("metrics.csv")).unwrap();

    // Evaluating the written checkpoint on the written test split must
    // reproduce the training run's test metrics byte for byte.
    let evald = dir.path().join("eval");
    assert_eq!(
        run(&[
            "eval",
            "--checkpoint",
            &ckpt,
            "--manifest",
            &p(&rund.join("test.csv")),
            "--out",
            &p(&evald),
        ]),
        0
    );
    let eval_metrics = fs::read_to_string(evald.join("metrics.csv")).unwrap();
    assert_eq!(train_metrics, eval_metrics);

    assert_eq!(
        run(&[
            "predict",
            "--checkpoint",
            &ckpt,
            "--manifest",
            &p(&rund.join("test.csv")),
        ]),
        0
    );

    let cams = dir.path().join("cams");
    assert_eq!(
        run(&[
            "explain",
            "--checkpoint",
            &ckpt,
            "--image",
            &p(&data.join("sample_00000.pgm")),
            "--out",
            &p(&cams),
        ]),
        0
    );
    assert!(cams.join("sample_00000_overlay.png").exists());

    assert_eq!(
        run(&[
            "bench",
            "--checkpoint",
            &ckpt,
            "--manifest",
            &p(&rund.join("test.csv")),
            "--runs",
            "1",
            "--warmup",
            "0",
        ]),
        0
    );

    let cv = dir.path().join("cv");
    assert_eq!(
        run(&[
            "crossval",
            "--manifest",
            &p(&manifest),
            "--out",
            &p(&cv),
            "--k",
            "3",
            "--epochs",
            "1",
            "--learning_rate",
            "0.001",
            "--seed",
            "1",
        ]),
        0
    );
    let folds = fs::read_to_string(cv.join("folds.csv")).unwrap();
    assert_eq!(folds.lines().count(), 6); // header + 3 folds + mean + std
    assert!(folds.lines().any(|l| l.starts_with("mean")));
    assert!(folds.lines().any(|l| l.starts_with("std")));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["train"]), 2); // missing --manifest
    assert_eq!(run(&["synth", "--out", "/tmp/x", "--threads", "4"]), 2);
}

#[test]
fn runtime_errors_exit_1() {
    // An output directory that cannot be created (its parent is a file)
    // is a runtime failure, not a usage error.
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "not a directory").unwrap();
    let out = blocker.join("sub");
    assert_eq!(
        run(&["synth", "--out", out.to_str().unwrap(), "--n", "4"]),
        1
    );
}
