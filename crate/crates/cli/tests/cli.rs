use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn synernet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synernet"))
        .args(args)
        .env_remove("SYNERNET_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = synernet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            files.insert(path.display().to_string(), fs::read(&path).unwrap());
        } else {
            files.extend(snapshot(&path));
        }
    }
    files
}

#[test]
fn synth_train_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let run = tmp.path().join("run0");
    ok(&["synth", "--seed", "7", "--out", p(&ds)]);
    assert!(ds.join("split_K4_s0.json").exists());

    ok(&["train", "--data", p(&ds), "--K", "4", "--seed", "0", "--epochs", "30", "--out", p(&run)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 4);
    assert_eq!(report["config"]["data_seed"], 7);
    assert_eq!(report["config"]["train"]["epochs"], 30);
    for f in ["training_log.csv", "trace.jsonl", "adapter.json", "adapter.f32", "embeddings_dump.f32"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 31);

    let before = snapshot(&run);
    let printed = ok(&["report", p(&run)]);
    assert!(printed.lines().count() >= 2);
    assert_eq!(snapshot(&run), before, "report must not touch the run directory");

    let eval = tmp.path().join("eval");
    ok(&["eval", "--data", p(&ds), "--K", "4", "--seed", "0", "--adapter", p(&run), "--out", p(&eval)]);
    let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("eval.json")).unwrap()).unwrap();
    assert_eq!(
        e["results"][0]["result"]["top1"], report["seeds"][0]["trained_ood_only"]["top1"],
        "reloaded adapter must reproduce the training-time evaluation"
    );
}

#[test]
fn ablate_writes_nine_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let ab = tmp.path().join("ab");
    ok(&["synth", "--seed", "0", "--out", p(&ds)]);
    ok(&["ablate", "--data", p(&ds), "--K", "1", "--seeds", "2", "--epochs", "10", "--out", p(&ab)]);
    let csv = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows[0].starts_with("Full SynerNet,NONE,"));
    assert!(rows.iter().any(|r| r.contains(",NO_NOM,")));
}

#[test]
fn gradcheck_passes_and_prints_the_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&["synth", "--seed", "0", "--out", p(&ds)]);
    let out = ok(&["gradcheck", "--data", p(&ds)]);
    let line = out.lines().find(|l| l.starts_with("max_rel_err=")).expect("summary line");
    let value: f64 = line["max_rel_err=".len()..].split_whitespace().next().unwrap().parse().unwrap();
    assert!(value < 1e-4);
}

#[test]
fn bad_input_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    ok(&["synth", "--seed", "0", "--out", p(&ds)]);
    let run = tmp.path().join("r");

    let unknown = synernet(&["train", "--data", p(&ds), "--flags", "NO_SUCH", "--out", p(&run)]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("kind="));

    let shots = synernet(&["train", "--data", p(&ds), "--K", "3", "--out", p(&run)]);
    assert_eq!(shots.status.code(), Some(2));

    let missing = synernet(&["report", p(&tmp.path().join("nope"))]);
    assert_eq!(missing.status.code(), Some(1));

    assert_eq!(synernet(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = Command::new(env!("CARGO_BIN_EXE_synernet"))
        .args(["synth", "--out", p(&a)])
        .env("SYNERNET_SEED", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(&["synth", "--seed", "3", "--out", p(&b)]);
    for f in ["manifest.json", "samples.f32", "encoders.f32"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn eval_picks_up_flags_from_a_multi_seed_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let run = tmp.path().join("run");
    let ev = tmp.path().join("ev");
    ok(&["synth", "--seed", "0", "--out", p(&ds)]);
    ok(&["train", "--data", p(&ds), "--K", "1", "--epochs", "5", "--flags", "NO_NOM", "--out", p(&run)]);
    let seed0 = run.join("seed0");
    assert!(seed0.join("adapter.json").exists());
    ok(&["eval", "--data", p(&ds), "--seed", "0", "--adapter", p(&seed0), "--out", p(&ev)]);
    let e: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(e["config"]["train"]["k"], 1);
    assert_eq!(e["results"][0]["result"]["top1"], 0.125);
}
