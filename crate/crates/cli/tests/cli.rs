use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--preset",
    "desk",
    "--seeds",
    "1",
    "--epochs",
    "2",
    "--set",
    "synth.n_domains=3",
    "--set",
    "synth.n_classes=3",
    "--set",
    "synth.samples_per_class=4",
    "--set",
    "meta.batch_size=12",
];

fn taco(args: &[&str], env_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_taco"));
    cmd.args(args).env_remove("TACO_OUTPUT_ROOT");
    if let Some(root) = env_root {
        cmd.env("TACO_OUTPUT_ROOT", root);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn find(dir: &Path, name: &str) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(find(&p, name));
        } else if p.file_name().is_some_and(|n| n == name) {
            out.push(p);
        }
    }
    out
}

#[test]
fn synth_data_round_trips_through_validate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let o = taco(&["synth-data", "--out", out.to_str().unwrap(), "--set", "synth.samples_per_class=2"], None);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(out.join("manifest.json").is_file());
    let csvs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv")).count();
    assert_eq!(csvs, 4 * 5 * 2);
    assert_eq!(code(&taco(&["validate-data", out.to_str().unwrap()], None)), 0);

    let victim = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "csv"))
        .unwrap();
    fs::write(&victim, "1,2\n").unwrap();
    let o = taco(&["validate-data", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains(victim.file_name().unwrap().to_str().unwrap()));
}

#[test]
fn config_errors_exit_with_one() {
    assert_eq!(code(&taco(&["train", "--set", "no_such_key=1"], None)), 1);
    assert_eq!(code(&taco(&["train", "--method", "sgd"], None)), 1);
    assert_eq!(code(&taco(&["train", "--fraction", "1.5"], None)), 1);
    assert_eq!(code(&taco(&["train", "--dataset", "/does/not/exist"], None)), 1);
    assert_eq!(code(&taco(&["train", "--bogus-flag"], None)), 1);
    assert_eq!(code(&taco(&["train", "--config", "/does/not/exist.toml"], None)), 1);
}

#[test]
fn empty_report_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&taco(&["report", dir.path().to_str().unwrap()], None)), 2);
}

#[test]
fn train_writes_record_history_and_checkpoint_under_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "method = \"taco\"\n[meta]\nalpha = 0.001\n").unwrap();
    let mut args = vec!["train", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = taco(&args, Some(dir.path()));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let records = find(dir.path(), "record.json");
    assert_eq!(records.len(), 1);
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(&records[0]).unwrap()).unwrap();
    assert_eq!(rec["method"], "taco");
    assert_eq!(rec["config"]["meta"]["alpha"], 0.001);
    let run_dir = records[0].parent().unwrap();
    let history = fs::read_to_string(run_dir.join("seed1/history.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0]["L_train"].is_number());
    let ckpt = fs::read(run_dir.join("seed1/model.ckpt")).unwrap();
    assert_eq!(&ckpt[..8], b"TACOCKPT");
    let hlen = u64::from_le_bytes(ckpt[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&ckpt[16..16 + hlen]).unwrap();
    assert_eq!(header["config_digest"], rec["config_digest"]);

    let o = taco(&["report", dir.path().to_str().unwrap()], None);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("taco"));
    assert!(dir.path().join("results.csv").is_file());
    assert!(dir.path().join("accuracy_vs_fraction.svg").is_file());
}

#[test]
fn output_dir_flag_overrides_env() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--method", "erm", "--output-dir", flag_dir.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&taco(&args, Some(env_dir.path()))), 0);
    assert_eq!(find(flag_dir.path(), "record.json").len(), 1);
    assert!(find(env_dir.path(), "record.json").is_empty());
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--set", "meta.outer_lr=1e30", "--set", "save_checkpoints=false"];
    args.extend_from_slice(SMALL);
    let o = taco(&args, Some(dir.path()));
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    assert!(stdout(&o).contains("failed"));
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--fractions", "0.5,1.0", "--targets", "0", "--methods", "erm"];
    args.extend_from_slice(SMALL);
    let o = taco(&args, Some(dir.path()));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("fraction,erm"));
    assert_eq!(csv.lines().count(), 3);
}
