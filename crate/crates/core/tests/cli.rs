//! The `glsd` command line: exit codes, idempotence and run manifests.

use std::path::Path;
use std::process::Command;

use glsd::cli::{run, RunManifest, RUN_MANIFEST_FILE};

const TINY: &[&str] = &[
    "epochs=2",
    "warmup_epochs=1",
    "batch_size=8",
    "global_size=16",
    "local_size=8",
    "patch=4",
    "dim=8",
    "depth=1",
    "mlp_hidden=16",
    "head_hidden=16",
    "head_bottleneck=8",
    "prototypes=16",
    "n_local_crops=2",
];

fn glsd(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_glsd")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn run_ok(args: &[&str]) -> String {
    let mut out = Vec::new();
    let mut full = vec!["glsd"];
    full.extend_from_slice(args);
    run(full, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    run_ok(&[
        "synth",
        "--out",
        p(dir),
        "--images",
        "16",
        "--classes",
        "4",
        "--size",
        "16",
        "--seed",
        seed,
    ]);
}

fn train(data: &Path, out: &Path, setting: &str) -> String {
    let mut args = vec![
        "train",
        "--dataset",
        p(data),
        "--out",
        p(out),
        "--setting",
        setting,
        "--seed",
        "3",
    ];
    args.extend_from_slice(TINY);
    run_ok(&args)
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let (code, _, err) = glsd(&["train", "--dataset", p(&missing), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(code, 2);
    assert!(err.contains("does not exist"), "{err}");
    assert_eq!(glsd(&["train"]).0, 2);
    assert_eq!(glsd(&["frobnicate"]).0, 2);
    assert_eq!(glsd(&["train", "--dataset", p(tmp.path()), "bogus_key=1"]).0, 2);
    assert_eq!(glsd(&["eval", "--checkpoint", p(&missing)]).0, 2);
    let (code, out, _) = glsd(&["--help"]);
    assert_eq!(code, 0);
    for verb in ["synth", "train", "eval", "viz"] {
        assert!(out.contains(verb));
    }
    // an unreadable dataset is an internal error, not a usage error
    std::fs::create_dir_all(tmp.path().join("broken")).unwrap();
    std::fs::write(tmp.path().join("broken/images.gltd"), b"not gltd").unwrap();
    std::fs::write(tmp.path().join("broken/labels.txt"), b"0\n").unwrap();
    assert_eq!(
        glsd(&["train", "--dataset", p(&tmp.path().join("broken")), "--dry-run"]).0,
        1
    );
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, "7");
    synth(&b, "7");
    synth(&c, "8");
    for f in ["images.gltd", "labels.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    assert_ne!(
        std::fs::read(a.join("images.gltd")).unwrap(),
        std::fs::read(c.join("images.gltd")).unwrap()
    );
}

#[test]
fn dry_run_reports_step_count() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "1");
    let out = run_ok(&[
        "train",
        "--dataset",
        p(tmp.path()),
        "--dry-run",
        "batch_size=5",
        "epochs=3",
        "warmup_epochs=1",
    ]);
    assert!(out.contains("steps_per_epoch: 4"), "{out}");
    assert!(out.contains("total_steps: 12"), "{out}");
    assert!(!tmp.path().join(RUN_MANIFEST_FILE).exists());
}

#[test]
fn config_file_and_flags_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, "1");
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# tiny run\nsetting = vanilla\nbatch_size = 4\ndataset = {}\n",
            p(&data)
        ),
    )
    .unwrap();
    let out = run_ok(&[
        "train",
        "--config",
        p(&cfg),
        "--dry-run",
        "epochs=10",
        "warmup_epochs=1",
    ]);
    assert!(
        out.contains("steps_per_epoch: 4") && out.contains("total_steps: 40"),
        "{out}"
    );
    let out = run_ok(&[
        "train",
        "--config",
        p(&cfg),
        "--dry-run",
        "batch_size=16",
        "epochs=10",
        "warmup_epochs=1",
    ]);
    assert!(out.contains("total_steps: 10"), "{out}");
}

#[test]
fn train_eval_viz_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, test, run_dir) = (tmp.path().join("d"), tmp.path().join("t"), tmp.path().join("r"));
    synth(&data, "1");
    synth(&test, "2");
    let log = train(&data, &run_dir, "geometric");
    assert!(log.contains("epoch   1"), "{log}");
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join(RUN_MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.seed, 3);
    assert_eq!(manifest.config["setting"], "geometric");
    assert_eq!(manifest.code_hash, glsd::cli::code_hash());
    assert_eq!(manifest.code_hash.len(), 64);
    for path in manifest.outputs.values() {
        assert!(Path::new(path).exists(), "{path}");
    }

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", p(&run_dir), "--k", "3"];
        args.extend_from_slice(extra);
        run_ok(&args)
    };
    let first = eval(&[]);
    let report: serde_json::Value = serde_json::from_str(&first).unwrap();
    for key in [
        "knn_top1",
        "linear_top1",
        "corr_accuracy",
        "corr_distance_error_px",
        "collapse_index_mean",
    ] {
        let v = report[key].as_f64().unwrap();
        assert!(v.is_finite() && v >= 0.0, "{key}");
    }
    assert_eq!(eval(&[]), first);
    assert_eq!(std::fs::read_to_string(run_dir.join("eval.json")).unwrap(), first);
    let knn_only: serde_json::Value = serde_json::from_str(&eval(&["--which", "knn", "--test", p(&test)])).unwrap();
    assert_eq!(knn_only.as_object().unwrap().len(), 1);

    let svg = tmp.path().join("m.svg");
    let jsonl = tmp.path().join("m.jsonl");
    for mode in ["geometric", "similarity"] {
        run_ok(&[
            "viz",
            "--image",
            p(&data),
            "--index",
            "3",
            "--checkpoint",
            p(&run_dir),
            "--mode",
            mode,
            "--out",
            p(&svg),
            "--matches",
            p(&jsonl),
        ]);
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(text.starts_with("<svg") && text.contains("<line"));
        assert_eq!(std::fs::read_to_string(&jsonl).unwrap().lines().count(), 1);
    }
}

#[test]
fn repeated_training_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, "1");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&data, &a, "similarity");
    // the second run is driven by the first run's manifest
    run_ok(&["train", "--manifest", p(&a.join(RUN_MANIFEST_FILE)), "--out", p(&b)]);
    for f in ["checkpoint.gltd", "checkpoint.json", "metrics.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}
