use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn emosem(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emosem"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn emosem")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Tiny corpus plus a config capping training at a few updates.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = emosem(
        &["synth", "--data-root", "data", "--per-emotion", "1", "--test-per-emotion", "1", "--seed", "3"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(dir.path().join("cfg.txt"), "max_updates = 3\nepochs = 5\n").unwrap();
    dir
}

fn first_image(dir: &Path) -> String {
    let manifest = fs::read_to_string(dir.join("data/manifest.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    format!("data/{}", rec["image_path"].as_str().unwrap())
}

#[test]
fn pipeline_train_eval_infer() {
    let ws = workspace();
    let d = ws.path();
    let before = tree(&d.join("data"));

    let o = emosem(&["train", "--data-root", "data", "--out", "run", "--config", "cfg.txt", "--mode", "multi"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.safetensors", "optimizer.safetensors", "train_log.jsonl", "run_record.json"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/run_record.json")).unwrap()).unwrap();
    assert_eq!(record["losses"].as_array().unwrap().len(), 3);
    assert_eq!(record["code_version"].as_str().unwrap().len(), 64);
    assert!(record["final_eval"].is_object());

    let o = emosem(&["eval", "--checkpoint", "run/model.safetensors", "--data-root", "data", "--out", "ev"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("ev/eval_report.json").is_file());
    // Re-scoring the written predictions reproduces the report.
    let o2 = emosem(&["eval", "--predictions", "ev/predictions.jsonl", "--data-root", "data"], d);
    assert_eq!(code(&o2), 0, "{}", String::from_utf8_lossy(&o2.stderr));
    assert_eq!(o.stdout, o2.stdout);

    let img = first_image(d);
    let o = emosem(&["infer", "--checkpoint", "run/model.safetensors", "--image", &img, "--out", "all"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_dir(d.join("all")).unwrap().count(), 25);
    let o = emosem(
        &["infer", "--checkpoint", "run/model.safetensors", "--image", &img, "--emotion", "awe", "--out", "one"],
        d,
    );
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_dir(d.join("one")).unwrap().count(), 4);
    emosem(&["infer", "--checkpoint", "run/model.safetensors", "--image", &img, "--emotion", "awe", "--out", "two"], d);
    assert_eq!(fs::read(d.join("one/result.json")).unwrap(), fs::read(d.join("two/result.json")).unwrap());

    assert!(before == tree(&d.join("data")), "dataset directory was modified");
}

#[test]
fn resume_continues_from_checkpoint() {
    let ws = workspace();
    let d = ws.path();
    let o = emosem(&["train", "--data-root", "data", "--out", "run", "--config", "cfg.txt"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(d.join("more.txt"), "max_updates = 5\nepochs = 5\n").unwrap();
    let o = emosem(&["train", "--data-root", "data", "--out", "run", "--config", "more.txt", "--resume"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5]);
}

#[test]
fn checkpoint_mode_mismatch_is_refused() {
    let ws = workspace();
    let d = ws.path();
    emosem(&["train", "--data-root", "data", "--out", "run", "--config", "cfg.txt", "--mode", "multi"], d);
    let o = emosem(&["eval", "--checkpoint", "run/model.safetensors", "--data-root", "data", "--mode", "single"], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("multi"));
}

#[test]
fn validation_errors_exit_2() {
    let ws = workspace();
    let d = ws.path();
    fs::write(d.join("bad.txt"), "no_such_key = 1\n").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--out", "run"],
        vec!["train", "--data-root", "data", "--out", "run", "--preset", "huge"],
        vec!["train", "--data-root", "data", "--out", "run", "--config", "bad.txt"],
        // paper preset expects 1024px images
        vec!["train", "--data-root", "data", "--out", "run", "--preset", "paper"],
        vec!["eval", "--data-root", "data"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let o = emosem(&args, d);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn divergence_exits_3_with_dump() {
    let ws = workspace();
    let d = ws.path();
    fs::write(d.join("hot.txt"), "max_updates = 6\nlr_lang = 1e30\nlr_seg = 1e30\n").unwrap();
    let o = emosem(&["train", "--data-root", "data", "--out", "run", "--config", "hot.txt"], d);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/nan_dump.json")).unwrap()).unwrap();
    assert!(!dump["batch"].as_array().unwrap().is_empty());
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = emosem(&["selftest"], dir.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.contains("mixer_block oracle"));
    assert!(!stdout.contains("FAILED"));
}
