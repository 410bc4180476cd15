use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn espt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_espt")).args(args).env("ESPT_THREADS", "1").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const RUN: &str = r#"
dataset = "data/manifest.toml"
out_dir = "runs/a"

[train]
shape = { n = 2, k = 1, l = 3 }
rotations = [90, 270]
lambda_bar = 1.0
alpha = 0.3
epochs = 2
episodes_per_epoch = 4
validation_every = 1
validation_tasks = 5
seed = 11
[train.backbone]
in_channels = 1
input_size = 16
rescale = true
blocks = [{ filters = 4, convs_per_block = 1, kernel = 3 }, { filters = 8, convs_per_block = 1, kernel = 3 }]
[train.optimizer]
lr_schedule = [[0, 0.05], [1, 0.01]]
momentum = 0.9
weight_decay = 0.0005

[eval]
shape = { n = 2, k = 1, l = 5 }
tasks = 20
"#;

fn gendata(root: &Path) {
    let out = root.join("data");
    let o = espt(&["gendata", "--classes", "8", "--samples", "10", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("manifest.toml").is_file() && out.join("spec.resolved.toml").is_file());
}

#[test]
fn gendata_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    gendata(root);
    let config = root.join("run.toml");
    fs::write(&config, RUN).unwrap();
    let cfg = config.to_str().unwrap();

    let o = espt(&["train", "--config", cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = root.join("runs/a");
    for f in ["config.resolved.toml", "metrics.jsonl", "summary.json", "best/checkpoint.toml", "last/checkpoint.toml"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    assert_eq!(log.lines().filter(|l| l.contains("val_accuracy")).count(), 2);

    let o = espt(&["train", "--config", cfg, "--out", root.join("runs/b").to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(root.join("runs/b/metrics.jsonl")).unwrap(), log);

    let best = run.join("best");
    for _ in 0..2 {
        let o = espt(&["eval", "--checkpoint", best.to_str().unwrap(), "--config", cfg]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let table = fs::read_to_string(run.join("eval_results.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "split,n,k,l,num_tasks,seed,mean_acc,ci");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], lines[2]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["num_tasks"], 20);

    let o = espt(&["eval", "--checkpoint", best.to_str().unwrap(), "--config", cfg, "--shape", "9,1,1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error kind=sampler code=2 message="), "{}", stderr(&o));

    let sweep = root.join("sweep.toml");
    fs::write(&sweep, RUN.replace("epochs = 2", "epochs = 1") + "\n[sweep]\naxis = { kind = \"alpha\", values = [0.0, 0.3] }\nseeds = [1]\n").unwrap();
    let o = espt(&["sweep", "--config", sweep.to_str().unwrap(), "--out", root.join("sweep").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(root.join("sweep/sweep_results.csv")).unwrap();
    assert!(table.starts_with("axis,value,seed,mean_acc,ci\nalpha,0,1,"), "{table}");
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = espt(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error kind=io code=2"), "{}", stderr(&o));

    fs::write(&missing, RUN.replace("alpha = 0.3", "alpha = -1.0")).unwrap();
    let o = espt(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind=config"), "{}", stderr(&o));

    let o = espt(&["gendata", "--out", dir.path().to_str().unwrap(), "--split", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = espt(&["eval", "--checkpoint", dir.path().join("none").to_str().unwrap(), "--dataset", "x", "--shape", "2,1,1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = espt(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(espt(&["--help"]).status.success());
}

#[test]
fn gradcheck_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grad.json");
    let o = espt(&["gradcheck", "--out", out.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}{}", stderr(&o));
    assert!(stdout.lines().last().unwrap().ends_with("PASS"));
    assert!(stdout.contains("temperature"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert!(report["params"].as_array().unwrap().len() > 10);
}
