use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn surgvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surgvl")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = surgvl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn run_log(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

fn files_under(dir: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path);
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["train", "--bogus"][..],
        &["frobnicate"],
        &["eval", "ablate", "--frames", "x"],
        &[],
    ] {
        let out = surgvl(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("Usage") || stderr.contains("--help"), "{args:?}: {stderr}");
    }
}

#[test]
fn runtime_failures_exit_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = surgvl(&["train", "--manifest", s(&dir.path().join("missing.jsonl")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: "));
}

#[test]
fn synth_train_ablate_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth", "build", "--out", s(&corpus), "--phases", "2", "--clips", "10", "--frames", "8"]);
    let before = files_under(&corpus);
    let manifest = corpus.join("manifest.jsonl");
    let prompts = corpus.join("prompts.tsv");

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 3, "batch_size": 4, "base_lr": 0.002}}"#).unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&run), "--preset", "tiny",
        "--epochs", "2", "--frames-per-clip", "2", "--prompts", s(&prompts),
    ]);
    assert!(run.join("last.ckpt").exists());
    let log = run_log(&run);
    assert_eq!(log["command"], "train");
    assert_eq!(log["config"]["train"]["epochs"], 2);
    assert_eq!(log["config"]["train"]["base_lr"], 0.002);
    assert_eq!(log["config"]["model"]["embed_dim"], 16);
    assert_eq!(log["seeds"]["train"], 0);
    assert_eq!(log["metrics"]["epochs"].as_array().unwrap().len(), 2);
    assert!(log["versions"]["surgvl"].is_string());

    let ablation = dir.path().join("ablation");
    let table = ok(&[
        "eval", "ablate", "--manifest", s(&manifest), "--checkpoint", s(&run.join("last.ckpt")),
        "--prompts", s(&prompts), "--out", s(&ablation), "--frames", "1,4",
    ]);
    assert_eq!(table.lines().count(), 3);
    for name in ["ablation.csv", "ablation.json", "ablation.txt", "run.json"] {
        assert!(ablation.join(name).exists(), "{name}");
    }
    let csv = std::fs::read_to_string(ablation.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect::<Vec<_>>(), ["1", "4"]);

    let zs = dir.path().join("zeroshot");
    ok(&[
        "eval", "zeroshot", "--manifest", s(&manifest), "--checkpoint", s(&run.join("last.ckpt")),
        "--prompts", s(&prompts), "--out", s(&zs), "--frames", "4", "--split", "val",
    ]);
    let result: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(zs.join("eval.json")).unwrap()).unwrap();
    assert_eq!(result["num_clips"], 2);
    assert_eq!(result["k_frames"], 4);

    assert_eq!(files_under(&corpus), before, "inputs were modified");
}

#[test]
fn rerunning_from_a_run_log_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["synth", "build", "--out", s(&corpus), "--phases", "2", "--clips", "5", "--frames", "4"]);
    let manifest = corpus.join("manifest.jsonl");
    let first = dir.path().join("a");
    ok(&[
        "train", "--manifest", s(&manifest), "--out", s(&first), "--preset", "tiny", "--epochs", "2",
        "--warmup-epochs", "1", "--batch-size", "2", "--frames-per-clip", "2", "--seed", "5",
    ]);
    let second = dir.path().join("b");
    ok(&["train", "--config", s(&first.join("run.json")), "--manifest", s(&manifest), "--out", s(&second)]);
    let (a, b) = (run_log(&first), run_log(&second));
    assert_eq!(a["config"]["train"], b["config"]["train"]);
    assert_eq!(a["metrics"]["final_loss"], b["metrics"]["final_loss"]);
    assert_eq!(
        std::fs::read(first.join("last.ckpt")).unwrap(),
        std::fs::read(second.join("last.ckpt")).unwrap()
    );
}

#[test]
fn pipeline_build_on_the_fixture_corpus() {
    let input = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/pipeline");
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["pipeline", "build", "--input", s(&input), "--out", s(dir.path())]);
    assert!(stdout.contains("2 clips kept"), "{stdout}");
    let log = run_log(dir.path());
    assert_eq!(log["metrics"]["kept"], 2);
    assert_eq!(log["metrics"]["dropped"]["no_audio"], 1);
    assert!(dir.path().join("manifest.jsonl").exists());

    let strict = tempfile::tempdir().unwrap();
    ok(&["pipeline", "build", "--input", s(&input), "--out", s(strict.path()), "--min-unique", "100"]);
    assert_eq!(run_log(strict.path())["metrics"]["kept"], 0);
}
