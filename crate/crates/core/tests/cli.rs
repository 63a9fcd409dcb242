use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use transagent::trainer::TrainState;
use transagent::RunConfig;

const SMALL: &[&str] = &[
    "encoder.depth=2",
    "encoder.width=16",
    "encoder.embed_width=16",
    "prompt.depth=2",
    "data.num_classes=4",
    "data.patches=4",
    "data.train_per_class=4",
    "data.test_per_class=6",
    "train.shots=4",
    "train.epochs=2",
    "train.batch_size=4",
    "eval.seeds=1,2",
];

fn transagent(dir: &Path, cache: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_transagent"));
    cmd.env("TRANSAGENT_CACHE_DIR", cache).args(args);
    let run_dir = format!("run.dir={}", dir.display());
    for s in SMALL.iter().chain(extra).chain([&run_dir.as_str()]) {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn small_config(extra: &[&str]) -> RunConfig {
    let mut cfg = RunConfig::default();
    for s in SMALL.iter().chain(extra) {
        cfg.set_pair(s).unwrap();
    }
    cfg
}

#[test]
fn ce_only_pipeline_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let (runs, cache) = (tmp.path().join("runs"), tmp.path().join("cache"));
    let zero = ["loss.lambda1=0", "loss.lambda2=0", "loss.lambda3=0"];
    for step in ["train", "export"] {
        ok_json(&transagent(&runs, &cache, &[step], &zero));
    }
    let eval = ok_json(&transagent(&runs, &cache, &["eval"], &zero));

    let exp = small_config(&[]).experiment().unwrap().ce_only();
    let lib = exp.run().unwrap().report;
    assert_eq!(eval["base"].as_f64().unwrap(), lib.base);
    assert_eq!(eval["novel"].as_f64().unwrap(), lib.novel);
    assert_eq!(eval["hm"].as_f64().unwrap(), lib.hm);

    let dir = Path::new(eval["run_dir"].as_str().unwrap());
    let run_id = dir.file_name().unwrap().to_str().unwrap();
    assert!(eval["config_hash"].as_str().unwrap().starts_with(run_id));
    for f in ["config.toml", "state-seed1.takc", "student-seed2.takc", "train.jsonl", "report.jsonl", "report.txt"] {
        assert!(dir.join(f).is_file(), "{f}");
    }

    let replay = Command::new(env!("CARGO_BIN_EXE_transagent"))
        .args(["eval", "--config"])
        .arg(dir.join("config.toml"))
        .args(["--set", &format!("run.dir={}", runs.display())])
        .output()
        .unwrap();
    let replay = ok_json(&replay);
    assert_eq!(replay["run_dir"], eval["run_dir"]);
    assert_eq!(replay["hm"], eval["hm"]);
}

#[test]
fn extract_writes_identical_caches_under_the_cache_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let (runs, cache) = (tmp.path().join("runs"), tmp.path().join("cache"));
    let a = ok_json(&transagent(&runs, &cache, &["extract"], &[]));
    let path = Path::new(a["cache"].as_str().unwrap()).to_path_buf();
    assert!(path.starts_with(&cache));
    let first = std::fs::read(&path).unwrap();
    ok_json(&transagent(&runs, &cache, &["extract"], &[]));
    assert_eq!(first, std::fs::read(&path).unwrap());
    assert!(a["records"].as_u64().unwrap() > 0);

    let cached = ok_json(&transagent(
        &runs,
        &cache,
        &["train"],
        &["knowledge.source=cache", "eval.seeds=1"],
    ));
    let live = ok_json(&transagent(&runs, &cache, &["train"], &["eval.seeds=1"]));
    assert_ne!(cached["config_hash"], live["config_hash"]);
    let read = |v: &Value| TrainState::load(&Path::new(v["run_dir"].as_str().unwrap()).join("state-seed1.takc")).unwrap();
    assert_eq!(read(&cached).prompts, read(&live).prompts);
}

#[test]
fn ablate_fusion_lists_three_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok_json(&transagent(
        tmp.path(),
        tmp.path(),
        &["ablate", "--axis", "fusion"],
        &["eval.seeds=1", "train.epochs=1"],
    ));
    let rows: Vec<&str> = out["rows"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.contains(&"gating"));
}

#[test]
fn errors_are_one_json_line_with_their_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let check = |out: Output, code: i32| {
        assert_eq!(out.status.code(), Some(code));
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        let v: Value = serde_json::from_str(&err).unwrap();
        assert_eq!(v["exit_code"], code);
        assert!(v["error"].is_string() && v["message"].is_string());
    };
    check(transagent(tmp.path(), tmp.path(), &["train"], &["no.such.key=1"]), 2);
    check(transagent(tmp.path(), tmp.path(), &["train"], &["train.epochs=many"]), 2);
    check(transagent(tmp.path(), tmp.path(), &["frobnicate"], &[]), 2);
    check(transagent(tmp.path(), tmp.path(), &["eval"], &[]), 3);
    check(transagent(tmp.path(), tmp.path(), &["train", "--config", "/nonexistent.toml"], &[]), 3);
    check(transagent(tmp.path(), tmp.path(), &["ablate", "--axis", "colour"], &[]), 2);

    let trained = ok_json(&transagent(tmp.path(), tmp.path(), &["train"], &["eval.seeds=1", "train.epochs=1"]));
    let snap = Path::new(trained["run_dir"].as_str().unwrap()).join("state-seed1.takc");
    let mut bytes = std::fs::read(&snap).unwrap();
    bytes[10] ^= 0xff;
    std::fs::write(&snap, bytes).unwrap();
    check(transagent(tmp.path(), tmp.path(), &["export"], &["eval.seeds=1", "train.epochs=1"]), 1);
}

#[test]
fn help_lists_every_key_with_its_default() {
    let out = Command::new(env!("CARGO_BIN_EXE_transagent")).arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = RunConfig::default();
    for (key, value) in cfg.iter() {
        let line = text.lines().find(|l| l.trim_start().starts_with(key)).unwrap_or_else(|| panic!("{key} missing"));
        assert!(line.contains(value), "{key}: {line}");
    }
    for sub in ["extract", "train", "export", "eval", "ablate", "gating-report"] {
        assert!(text.contains(sub), "{sub}");
    }
}
