use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use base64::Engine;
use lift_core::cache::EmbeddingCache;
use lift_core::cli::EvalReport;

fn lift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lift"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lift(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn build_cache_from_jsonl_and_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = dir.path().join("e.jsonl");
    fs::write(
        &jsonl,
        "{\"id\": 3, \"vector\": [3, 4]}\n\n{\"id\": 1, \"vector\": [0.1, -2]}\n",
    )
    .unwrap();
    let out = dir.path().join("j.lftc");
    let stdout = ok(&[
        "build-cache",
        "--input",
        s(&jsonl),
        "--out",
        s(&out),
        "--normalize",
        "--verify",
    ]);
    assert!(stdout.contains("verified 2 records"), "{stdout}");
    let cache = EmbeddingCache::open(&out).unwrap();
    assert_eq!(cache.lookup(3).unwrap(), vec![0.6, 0.8]);
    assert!(dir.path().join("j.lftc.json").exists());

    let b64 = |v: &[f32]| {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        base64::engine::general_purpose::STANDARD.encode(bytes)
    };
    let tsv = dir.path().join("e.tsv");
    fs::write(
        &tsv,
        format!(
            "10\t{}\n20\t{}\n",
            b64(&[0.1, 0.2, 0.3]),
            b64(&[1.0, 2.0, 3.0])
        ),
    )
    .unwrap();
    let out = dir.path().join("t.lftc");
    ok(&[
        "build-cache",
        "--input",
        s(&tsv),
        "--out",
        s(&out),
        "--dtype",
        "bfloat16",
        "--verify",
    ]);
    let cache = EmbeddingCache::open(&out).unwrap();
    assert_eq!(cache.lookup(10).unwrap()[0], 0.099609375);
    assert_eq!(cache.lookup(20).unwrap(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn build_cache_reports_bad_line_and_leaves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("e.jsonl");
    fs::write(&input, "{\"id\": 1, \"vector\": [1, 2]}\n{\"id\": 2, \"vector\": [1, 2]}\n{\"id\": 3, \"vec\": [1]}\n").unwrap();
    let out = dir.path().join("x.lftc");
    let res = lift(&["build-cache", "--input", s(&input), "--out", s(&out)]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

    fs::write(
        &input,
        "{\"id\": 1, \"vector\": [1, 2]}\n{\"id\": 1, \"vector\": [3, 4]}\n",
    )
    .unwrap();
    let res = lift(&["build-cache", "--input", s(&input), "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("duplicate"));
    assert!(!out.exists());
}

#[test]
fn unknown_flags_are_rejected() {
    let res = lift(&["flops", "--bogus"]);
    assert_eq!(res.status.code(), Some(2));
    let res = lift(&["train", "--config", "x.toml", "--out", "o", "--lr", "1"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn flops_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["flops", "--out", s(dir.path())]);
    for v in [
        "27.5", "104.9", "367.5", "46.4", "59.3", "134.4", "154.5", "425.0", "463.7",
    ] {
        assert!(stdout.contains(v), "missing {v} in\n{stdout}");
    }
    let csv = fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(dir.path().join("resolved_config.json").exists());
}

#[test]
fn synth_train_resume_eval_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth-data",
        "--out",
        s(&data),
        "--samples",
        "64",
        "--classes",
        "4",
        "--image-size",
        "16",
        "--dim",
        "8",
        "--steps",
        "6",
    ]);
    let config = data.join("experiment.toml");
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace("checkpoint_every = 0", "checkpoint_every = 3");
    fs::write(&config, text).unwrap();

    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&run),
        "--seed",
        "5",
    ]);
    let resolved = fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 5"), "{resolved}");
    assert_eq!(
        fs::read_to_string(run.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        7
    );

    // resuming from the step-3 checkpoint reproduces the final state exactly
    let resumed = dir.path().join("resumed");
    let mid = run.join("checkpoints").join("step-000003.lftk");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&resumed),
        "--seed",
        "5",
        "--checkpoint",
        s(&mid),
    ]);
    assert_eq!(
        fs::read(resumed.join("final.lftk")).unwrap(),
        fs::read(run.join("final.lftk")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(resumed.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let ev = dir.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("final.lftk")),
        "--config",
        s(&config),
        "--out",
        s(&ev),
        "--ranks",
    ]);
    let report: EvalReport = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report.pool_size, 64);
    assert_eq!(report.classes, Some(4));
    assert!((0.0..=1.0).contains(&report.i2t_top1));
    let saved: EvalReport =
        serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
    assert_eq!(
        fs::read_to_string(ev.join("ranks.csv"))
            .unwrap()
            .lines()
            .count(),
        129
    );

    let pr = dir.path().join("probe");
    let stdout = ok(&[
        "probe",
        "--cache",
        s(&data.join("captions.lftc")),
        "--limit",
        "10",
        "--out",
        s(&pr),
    ]);
    assert!(stdout.contains("over 45 pairs"), "{stdout}");
    assert!(pr.join("probe.json").exists());

    let res = lift(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("missing.lftk")),
        "--config",
        s(&config),
    ]);
    assert!(!res.status.success());
}
