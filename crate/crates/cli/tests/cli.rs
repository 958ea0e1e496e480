use std::path::Path;
use std::process::{Command, Output};

fn hsgat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsgat")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hsgat(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn dataset(dir: &Path) -> String {
    let data = dir.join("sbm");
    let data_s = data.to_str().unwrap().to_string();
    ok(&[
        "generate-sbm", "--out", &data_s, "--nodes", "60", "--classes", "3", "--p-intra", "0.25", "--p-inter", "0.04",
        "--feature-dim", "6", "--seed", "1",
    ]);
    data_s
}

const FAST: [&str; 6] = ["--epochs", "20", "--heads", "2", "--hidden", "4"];

#[test]
fn train_writes_report_history_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    let mut args = vec!["train", "--dataset", &data, "--seeds", "2"];
    args.extend(FAST);
    let (out, hist, ckpt) = (p("r.json"), p("h.jsonl"), p("c.json"));
    args.extend(["--out", &out, "--history", &hist, "--checkpoint", &ckpt]);
    ok(&args);

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    for key in ["dataset", "config", "seeds", "test_acc", "mean_test_acc", "std_test_acc", "homophily", "wall_time_secs"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["test_acc"].as_array().unwrap().len(), 2);
    assert_eq!(report["config"]["lambda"], 0.1);
    for i in 0..2 {
        assert!(dir.path().join(format!("h.seed{i}.jsonl")).exists());
        assert!(dir.path().join(format!("c.seed{i}.json")).exists());
    }

    let scores = p("a.csv");
    let summary = p("a.json");
    ok(&["attn-dist", "--dataset", &data, "--checkpoint", &p("c.seed0.json"), "--out", &summary]);
    let csv = std::fs::read_to_string(&scores).unwrap();
    assert!(csv.starts_with("layer,head,target,source,group,score\n"));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(&summary).unwrap()).unwrap();
    assert_eq!(summary["held_out"], "any_endpoint");
}

#[test]
fn identical_runs_give_identical_history_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = |name: &str| {
        let path = dir.path().join(name);
        let path_s = path.to_str().unwrap();
        let mut args = vec!["train", "--dataset", &data, "--seed", "7", "--history", path_s, "--out"];
        let report = dir.path().join(format!("{name}.report"));
        args.push(report.to_str().unwrap());
        args.extend(FAST);
        ok(&args);
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a.jsonl"), run("b.jsonl"));
}

#[test]
fn lambda_zero_baseline_and_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let mut args = vec!["train", "--dataset", &data, "--lambda", "0"];
    args.extend(FAST);
    let report: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(report["config"]["lambda"], 0.0);

    let mut args = vec!["homophily-sweep", "--dataset", &data, "--seeds", "1", "--k-grid", "0,0.5,1"];
    args.extend(FAST);
    let csv = ok(&args);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,mean_acc,std_acc,homophily");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("1,") && lines[3].ends_with(",1"));
}

#[test]
fn grid_search_reports_rows_and_best() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let text = ok(&[
        "grid-search", "--dataset", &data, "--seeds", "1", "--epochs", "10", "--layers", "1", "--heads", "1,2",
        "--hidden", "4", "--lr", "0.005", "--dropout", "0",
    ]);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let best = report["best_index"].as_u64().unwrap() as usize;
    let vals: Vec<f64> = rows.iter().map(|r| r["mean_val_acc"].as_f64().unwrap()).collect();
    assert!(vals.iter().all(|&v| v <= vals[best]));
}

#[test]
fn malformed_dataset_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    std::fs::write(Path::new(&data).join("edges.txt"), "0 1\n1 x\n").unwrap();
    let out = hsgat(&["train", "--dataset", &data]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("edges.txt:2"), "{err}");
}

#[test]
fn help_documents_outputs() {
    let sweep = ok(&["homophily-sweep", "--help"]);
    assert!(sweep.contains("k, mean_acc, std_acc, homophily"));
    let attn = ok(&["attn-dist", "--help"]);
    assert!(attn.contains("layer, head, target, source, group"));
    assert!(attn.contains("--strict-heldout"));
    let train = ok(&["train", "--help"]);
    assert!(train.contains("epoch, L_V, L_E, train_acc, val_acc"));
}
