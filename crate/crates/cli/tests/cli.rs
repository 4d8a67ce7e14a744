use std::fs;
use std::path::Path;

use exitweave_cli::commands::{
    cmd_allocate, cmd_eval, cmd_gradcheck, cmd_train, default_q_grid, parse_confidence_csv, parse_q_grid, EvalOptions,
    TrainOverrides,
};
use exitweave_cli::metrics::MetricsRecord;
use exitweave_cli::run;

use exitweave::backbone::forward_all;
use exitweave::checkpoint::Checkpoint;
use exitweave::gradcheck::Sabotage;

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["exitweave"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn write_config(dir: &Path, extra_train: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            r#"
[train]
epochs = 3
batch_size = 16
seed = 5
{extra_train}

[backbone]
trunk_widths = [8, 8, 8]

[wpn]
hidden_width = 16

[dataset]
source = "synthetic"
classes = 4
dim = 6
train_per_class = 20
val_per_class = 10
test_per_class = 10
spread = 0.6
seed = 3

[output]
dir = "out"
"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn missing_config_exits_with_two_and_names_the_path() {
    let (code, _, err) = run_cli(&["train", "--config", "/no/such/run.toml"]);
    assert_eq!(code, 2);
    assert!(err.contains("/no/such/run.toml"), "{err}");
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "learning_rate = 0.1");
    let (code, _, err) = run_cli(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn train_then_eval_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "");
    let out = dir.path().join("a");
    let (code, stdout, err) = run_cli(&["train", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("checkpoint.json"));
    for f in ["checkpoint.json", "resolved_config.json", "history.json", "scatter.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["backbone"]["input_dim"], 6);
    assert_eq!(resolved["wpn"]["delta"], 0.8);
    assert_eq!(resolved["train"]["alpha"], 0.1);

    let ckpt = out.join("checkpoint.json");
    let (code, stdout, err) = run_cli(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--q-grid", "0.01,0.5,1,3"]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("accuracy"));
    let metrics = MetricsRecord::from_json(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.sweep.len(), 4);
    assert_eq!(metrics.anytime.len(), 3);
    assert!(!metrics.scatter.is_empty());
    let sweep_csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(
        sweep_csv.lines().next().unwrap(),
        "q,accuracy,expected_mul_adds,count_1,count_2,count_3,threshold_1,threshold_2,threshold_3"
    );
    assert_eq!(sweep_csv.lines().count(), 5);

    // Tiny q puts (almost) everything on exit 1.
    let c1 = metrics.anytime[0].mul_adds as f64;
    let low = &metrics.sweep[0];
    assert!(low.expected_mul_adds <= c1 * 1.5, "{} vs {c1}", low.expected_mul_adds);
    assert!(metrics.sweep[3].expected_mul_adds >= low.expected_mul_adds);

    // Re-running eval reproduces the document byte for byte.
    let first = fs::read(out.join("metrics.json")).unwrap();
    run_cli(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--q-grid", "0.01,0.5,1,3"]);
    assert_eq!(first, fs::read(out.join("metrics.json")).unwrap());
}

#[test]
fn dynamic_accuracy_matches_a_per_sample_replay() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "");
    let outcome = cmd_train(&path, &TrainOverrides::default()).unwrap();
    let ckpt_path = outcome.dir.join("checkpoint.json");
    let eval = cmd_eval(
        &ckpt_path,
        &EvalOptions {
            q_grid: Some(vec![0.3, 0.9, 1.7]),
            ..EvalOptions::default()
        },
    )
    .unwrap();
    let splits = outcome.resolved.dataset.load().unwrap();
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let test = forward_all(&ckpt.state.backbone, &splits.test.features, &splits.test.labels).unwrap();
    for row in &eval.metrics.sweep {
        let mut correct = 0;
        let mut counts = vec![0; 3];
        for i in 0..test.batch_size() {
            let mut exit = 2;
            for k in 0..2 {
                if test.confidences.get(i, k) >= row.thresholds[k] {
                    exit = k;
                    break;
                }
            }
            counts[exit] += 1;
            let probs = test.probs(i, exit);
            let pred = (0..probs.len()).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
            correct += usize::from(pred == splits.test.labels[i]);
        }
        assert_eq!(counts, row.exit_counts);
        assert_eq!(correct as f64 / test.batch_size() as f64, row.accuracy);
    }
}

#[test]
fn eval_rejects_a_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "");
    let outcome = cmd_train(&path, &TrainOverrides::default()).unwrap();
    let data = dir.path().join("other.toml");
    fs::write(
        &data,
        r#"
[dataset]
source = "synthetic"
classes = 4
dim = 7
train_per_class = 5
val_per_class = 5
test_per_class = 5
"#,
    )
    .unwrap();
    let (code, _, err) = run_cli(&[
        "eval",
        "--checkpoint",
        outcome.dir.join("checkpoint.json").to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("compatibility"), "{err}");
}

#[test]
fn metrics_reader_rejects_unknown_schema_versions() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "");
    let outcome = cmd_train(&path, &TrainOverrides::default()).unwrap();
    let eval = cmd_eval(&outcome.dir.join("checkpoint.json"), &EvalOptions::default()).unwrap();
    assert_eq!(eval.metrics.sweep.len(), default_q_grid().len());
    let text = eval.metrics.to_json().unwrap().replace("\"schema_version\": 1", "\"schema_version\": 2");
    let err = MetricsRecord::from_json(&text).unwrap_err();
    assert!(err.to_string().contains("schema version 2"), "{err}");
}

#[test]
fn gradcheck_passes_and_detects_sabotage() {
    let (code, stdout, _) = run_cli(&["gradcheck"]);
    assert_eq!(code, 0, "{stdout}");
    for suite in ["backbone", "meta_weight_grad", "wpn_backward", "end_to_end"] {
        assert!(stdout.contains(suite), "{stdout}");
    }
    let (code, stdout, _) = run_cli(&["gradcheck", "--sabotage"]);
    assert_eq!(code, 1, "{stdout}");
    assert!(stdout.contains("FAIL"));
    let outcome = cmd_gradcheck(None, Some(3), Sabotage::None).unwrap();
    assert!(outcome.passed());
}

#[test]
fn gradcheck_refuses_large_backbones() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.toml");
    fs::write(&path, "[backbone]\ninput_dim = 30\ntrunk_widths = [40, 40]\nnum_classes = 10\n").unwrap();
    let (code, _, err) = run_cli(&["gradcheck", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("at most 2000"), "{err}");
}

#[test]
fn allocate_prints_sizes_subsets_and_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("conf.csv");
    let mut text = String::from("exit1,exit2,exit3,exit4,exit5\n");
    for i in 0..100 {
        let v: Vec<String> = (0..5).map(|k| format!("{}", ((i * 37 + k * 11) % 100) as f64 / 100.0)).collect();
        text.push_str(&v.join(","));
        text.push('\n');
    }
    fs::write(&path, text).unwrap();
    let outcome = cmd_allocate(&path, 0.5, Some(5)).unwrap();
    assert_eq!(outcome.sizes, vec![51, 25, 12, 6, 6]);
    assert_eq!(outcome.thresholds[4], 0.0);
    let (code, stdout, _) = run_cli(&["allocate", "--confidences", path.to_str().unwrap(), "--q", "1"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("sizes [20, 20, 20, 20, 20]"), "{stdout}");
    assert!(stdout.contains("thresholds"));
}

#[test]
fn malformed_csv_reports_the_line() {
    let err = parse_confidence_csv("0.1,0.2\n0.3,0.4\n0.5,oops\n").unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    let err = parse_confidence_csv("0.1,0.2\n\n0.3\n").unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
    let err = parse_confidence_csv("0.1,1.2\n").unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    fs::write(&path, "0.1,0.2\n0.3,x\n").unwrap();
    let (code, _, err) = run_cli(&["allocate", "--confidences", path.to_str().unwrap(), "--q", "0.5"]);
    assert_eq!(code, 1);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn q_grid_parsing() {
    assert_eq!(parse_q_grid("0.5, 1,2").unwrap(), vec![0.5, 1.0, 2.0]);
    assert!(parse_q_grid("0.5,0").is_err());
    assert!(parse_q_grid("a").is_err());
    let grid = default_q_grid();
    assert_eq!(grid.len(), 40);
    assert!((grid[0] - 0.05).abs() < 1e-12 && (grid[39] - 2.0).abs() < 1e-12);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "");
    let a = cmd_train(
        &path,
        &TrainOverrides {
            out: Some(dir.path().join("s1")),
            seed: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let b = cmd_train(
        &path,
        &TrainOverrides {
            out: Some(dir.path().join("s2")),
            seed: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(a.resolved.train.seed, 1);
    assert_ne!(a.state.backbone, b.state.backbone);
    assert_ne!(a.resolved.hash(), b.resolved.hash());
}
