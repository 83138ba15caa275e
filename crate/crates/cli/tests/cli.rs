use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crwn::datasets::write_idx;
use serde_json::{json, Value};

fn crwn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crwn"))
        .args(args)
        .env_remove("CRWN_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small digit-like IDX files: class `c` lights up row band `c`.
fn fake_mnist(dir: &Path, n_train: usize, n_test: usize) {
    let mnist = dir.join("mnist");
    fs::create_dir_all(&mnist).unwrap();
    let make = |n: usize, offset: usize| {
        let mut pixels = vec![0u8; n * 784];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i + offset) % 10;
            labels.push(c as u8);
            for y in (2 * c + 4)..(2 * c + 7) {
                for x in 4..24 {
                    pixels[i * 784 + y * 28 + x] = (180 + (i * 7 + x) % 70) as u8;
                }
            }
        }
        write_idx(&pixels, n, 28, 28, &labels)
    };
    let (img, lab) = make(n_train, 0);
    fs::write(mnist.join("train-images-idx3-ubyte"), img).unwrap();
    fs::write(mnist.join("train-labels-idx1-ubyte"), lab).unwrap();
    let (img, lab) = make(n_test, 3);
    fs::write(mnist.join("t10k-images-idx3-ubyte"), img).unwrap();
    fs::write(mnist.join("t10k-labels-idx1-ubyte"), lab).unwrap();
}

fn config(arch: Value, tasks: Value) -> Value {
    json!({
        "experiment": {
            "arch": arch,
            "tasks": tasks,
            "schedule": { "batches": 30 },
            "batch_size": 16,
            "optimizer": { "kind": "rmsprop", "lr": 0.01 },
            "mode": "both",
            "seeds": { "model": 1, "data": 1, "shuffle": 1 },
            "eval_batch": 25
        }
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn fc(hidden: usize) -> Value {
    json!({ "kind": "mlp", "hidden": [hidden, hidden] })
}

#[test]
fn paramcount_matches_table_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (fc(1024), 2833),
        (fc(256), 1297),
        (fc(4096), 8977),
        (json!({ "kind": "flynet", "expansion": 20 }), 15681),
        (json!({ "kind": "flynet", "expansion": 10 }), 7841),
    ];
    for (arch, want) in cases {
        let cfg = write_config(dir.path(), "c.json", &config(arch, json!({"kind": "rotated_mnist", "tasks": 36})));
        let out = crwn(&["paramcount", "-c", &cfg]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
        assert_eq!(v["params_per_task"], want);
    }
}

#[test]
fn config_errors_exit_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"experiment\": { ").unwrap();
    let out = crwn(&["train", "-c", bad.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(!out_dir.exists());

    let mut cfg = config(fc(256), json!({"kind": "permuted_mnist", "tasks": 2}));
    cfg["experiment"]["optimizer"]["lrr"] = json!(0.1);
    let p = write_config(dir.path(), "unknown.json", &cfg);
    let out = crwn(&["train", "-c", &p]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("experiment.optimizer"), "{}", stderr(&out));

    let mut cfg = config(fc(256), json!({"kind": "permuted_mnist", "tasks": 2}));
    cfg["experiment"]["seeds"].as_object_mut().unwrap().remove("shuffle");
    let p = write_config(dir.path(), "missing.json", &cfg);
    let out = crwn(&["train", "-c", &p]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("experiment.seeds"), "{}", stderr(&out));
    assert!(stderr(&out).contains("shuffle"), "{}", stderr(&out));

    let cfg = config(json!({"kind": "cnn", "width": 1}), json!({"kind": "rotated_mnist", "tasks": 2}));
    let p = write_config(dir.path(), "mismatch.json", &cfg);
    assert_eq!(code(&crwn(&["paramcount", "-c", &p])), 2);
}

#[test]
fn verify_empty_dir_lists_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = crwn(&["dataset", "verify", "--data-dir", dir.path().to_str().unwrap(), "--source", "mnist"]);
    assert_eq!(code(&out), 3);
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.ends_with("missing")).count(), 4);
    for name in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"] {
        assert!(text.contains(name));
    }
    let out = crwn(&["dataset", "verify", "--data-dir", dir.path().to_str().unwrap()]);
    assert_eq!(stdout(&out).lines().filter(|l| l.ends_with("missing")).count(), 6);
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &config(fc(16), json!({"kind": "permuted_mnist", "tasks": 2})));
    let out = crwn(&["train", "-c", &cfg, "--data-dir", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

fn final_row(metrics_path: &Path) -> Vec<(u32, f64)> {
    let m: Value = serde_json::from_slice(&fs::read(metrics_path).unwrap()).unwrap();
    let ids = m["task_ids"].as_array().unwrap();
    let row = m["final_row"].as_array().unwrap();
    let mut out: Vec<(u32, f64)> = ids
        .iter()
        .zip(row)
        .map(|(i, a)| (i.as_u64().unwrap() as u32, a.as_f64().unwrap()))
        .collect();
    out.sort_by_key(|r| r.0);
    out
}

fn eval_rows(text: &str) -> Vec<(u32, f64)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let (t, a) = l.split_once(',').unwrap();
            (t.parse().unwrap(), a.parse().unwrap())
        })
        .collect()
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path(), 200, 60);
    let data = dir.path().to_str().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "c.json",
        &config(json!({"kind": "flynet", "expansion": 1}), json!({"kind": "rotated_mnist", "tasks": 5})),
    );
    let out = crwn(&["train", "-c", &cfg, "--tasks", "2", "--data-dir", data, "--out", out_dir.to_str().unwrap(), "--precision", "f64"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["accuracy_matrix.csv", "metrics.json", "runlog.csv", "checkpoint.crwn", "resolved_config.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let metrics: Value = serde_json::from_slice(&fs::read(out_dir.join("metrics.json")).unwrap()).unwrap();
    for key in ["acc", "forgetting", "params_per_task"] {
        assert!(metrics.get(key).is_some());
    }
    let row = final_row(&out_dir.join("metrics.json"));
    assert_eq!(row.len(), 2);

    let ckpt = out_dir.join("checkpoint.crwn");
    let out = crwn(&["eval", "-c", &cfg, "--data-dir", data, "--precision", "f64", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let evaluated = eval_rows(&stdout(&out));
    assert_eq!(evaluated.len(), 2);
    for ((t1, a1), (t2, a2)) in row.iter().zip(&evaluated) {
        assert_eq!(t1, t2);
        assert_eq!(a1.to_bits(), a2.to_bits());
    }

    let out = crwn(&["eval", "-c", &cfg, "--data-dir", data, "--precision", "f64", "--checkpoint", ckpt.to_str().unwrap(), "--task", "1"]);
    assert_eq!(code(&out), 0);
    assert_eq!(eval_rows(&stdout(&out)).len(), 1);

    // precision is part of the model identity
    let out = crwn(&["eval", "-c", &cfg, "--data-dir", data, "--precision", "f32", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 4);

    // rerunning the resolved config reproduces the run
    let again = dir.path().join("again");
    let resolved = out_dir.join("resolved_config.json");
    let out = crwn(&["train", "-c", resolved.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(again.join("checkpoint.crwn")).unwrap(), fs::read(&ckpt).unwrap());
    assert_eq!(final_row(&again.join("metrics.json")), row);
}

#[test]
fn checkpoint_from_other_architecture_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path(), 100, 30);
    let data = dir.path().to_str().unwrap();
    let out_dir = dir.path().join("run");
    let tasks = json!({"kind": "permuted_mnist", "tasks": 1});
    let small = write_config(dir.path(), "fc256.json", &config(fc(256), tasks.clone()));
    let out = crwn(&["train", "-c", &small, "--data-dir", data, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let big = write_config(dir.path(), "fc512.json", &config(fc(512), tasks));
    let ckpt = out_dir.join("checkpoint.crwn");
    let out = crwn(&["eval", "-c", &big, "--data-dir", data, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    let garbage = dir.path().join("garbage.crwn");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = crwn(&["eval", "-c", &small, "--data-dir", data, "--checkpoint", garbage.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
}

#[test]
fn ablate_emits_paired_rows() {
    let dir = tempfile::tempdir().unwrap();
    fake_mnist(dir.path(), 100, 30);
    let data = dir.path().to_str().unwrap();
    let out_dir = dir.path().join("abl");
    let cfg = write_config(dir.path(), "c.json", &config(fc(32), json!({"kind": "rotated_mnist", "tasks": 2})));
    let out = crwn(&["ablate", "-c", &cfg, "--data-dir", data, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,task,accuracy");
    assert_eq!(lines.iter().filter(|l| l.starts_with("both,")).count(), 2);
    assert_eq!(lines.iter().filter(|l| l.starts_with("local,")).count(), 2);
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(summary["delta_pp"].is_number());
}
