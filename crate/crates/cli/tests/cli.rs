use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pgst_cli::experiment::{layers_csv, prompts_csv, LayerRow, PromptRow, PROMPT_KINDS};
use pgst_cli::manifest::{list_files, RunManifest, LOCK_FILE};
use pgst_cli::report::{EvalRecord, Stage, Summary};
use pgst_core::evalkit::EvalReport;

fn pgst(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgst"))
        .args(args)
        .current_dir(dir)
        .env("PGST_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn gen(dir: &Path, out: &str) -> Output {
    pgst(dir, &["gen-data", "--out", out, "--seed", "1", "--n-train", "6", "--n-val", "2", "--n-test", "2", "--size", "64"])
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pgst(dir.path(), &["eval", "--data", "d", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
}

#[test]
fn unknown_flag_and_subcommand_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pgst(dir.path(), &["gen-data", "--out", "d", "--bogus"]).status.code(), Some(2));
    assert_eq!(pgst(dir.path(), &["train-target"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1_with_cause() {
    let dir = tempfile::tempdir().unwrap();
    let out = pgst(dir.path(), &["eval", "--ckpt", "missing.ckpt", "--data", "d", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gen_data_is_byte_reproducible_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gen(dir.path(), "a").status.success());
    assert!(gen(dir.path(), "b").status.success());
    let a = list_files(&dir.path().join("a")).unwrap();
    let b = list_files(&dir.path().join("b")).unwrap();
    assert_eq!(a.len(), b.len());
    assert!(a.len() > 10);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }

    let text = fs::read_to_string(dir.path().join("a/manifest.json")).unwrap();
    let runs: Vec<RunManifest> = serde_json::from_str(&text).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].command, "gen-data");
    assert_eq!(runs[0].seed, Some(1));
    assert!(runs[0].deterministic);
    assert_eq!(runs[0].outputs.len(), a.len());
    assert!(!dir.path().join("a").join(LOCK_FILE).exists());
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("d")).unwrap();
    fs::write(dir.path().join("d").join(LOCK_FILE), "1").unwrap();
    let out = gen(dir.path(), "d");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"data": {"n_train": 3, "n_val": 1, "n_test": 1, "height": 64, "width": 64}}"#)
        .unwrap();
    let out = pgst(dir.path(), &["gen-data", "--config", "cfg.json", "--out", "d", "--n-train", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bench: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("d/benchmark.json")).unwrap()).unwrap();
    assert_eq!(bench["n_train"], 2);
    assert_eq!(bench["n_val"], 1);
    assert_eq!(bench["height"], 64);
}

fn record(stage: Stage, domain: &str, map50: f64) -> EvalRecord {
    EvalRecord {
        stage,
        checkpoint: "model.ckpt".into(),
        report: EvalReport {
            domain_tag: domain.into(),
            n_images: 2,
            per_class_ap: Default::default(),
            map50,
            score_thresh: 0.05,
            nms_iou: 0.5,
            model_fingerprint: String::new(),
            prompt_fingerprint: String::new(),
            config_fingerprint: String::new(),
        },
    }
}

#[test]
fn report_has_the_four_ablation_rows() {
    let dir = tempfile::tempdir().unwrap();
    for (i, st) in Stage::ROWS.iter().enumerate() {
        let run = dir.path().join(format!("run{i}"));
        fs::create_dir_all(&run).unwrap();
        for (j, d) in ["daytime_sunny", "night_rainy"].iter().enumerate() {
            let rec = record(*st, d, 0.1 * (i + 1) as f64 + 0.01 * j as f64);
            fs::write(run.join(format!("eval_{d}.json")), serde_json::to_string(&rec).unwrap()).unwrap();
        }
    }
    let out = pgst(dir.path(), &["report", "."]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let labels: Vec<&str> = text.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(labels, ["baseline", "+SrcAug", "+PGST", "full"]);

    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row,src_aug,pgst,daytime_sunny,night_sunny,dusk_rainy,night_rainy,daytime_foggy");
    assert_eq!(lines[4], "full,true,true,0.400000,,,0.410000,");
}

#[test]
fn summary_averages_repeated_cells() {
    let mut s = Summary::default();
    let st = Stage { src_aug: true, pgst: true };
    s.add(&record(st, "night_sunny", 0.2));
    s.add(&record(st, "night_sunny", 0.4));
    assert!((s.get(st, "night_sunny").unwrap() - 0.3).abs() < 1e-12);
    assert_eq!(s.get(Stage::default(), "night_sunny"), None);
}

#[test]
fn ablation_csv_layouts() {
    let rows = [
        LayerRow { layers: vec![1], map50: 0.5 },
        LayerRow { layers: vec![1, 5], map50: 0.25 },
        LayerRow { layers: vec![1, 3, 5], map50: 0.125 },
    ];
    assert_eq!(layers_csv(&rows), "layers,map50\n1,0.500000\n1+5,0.250000\n1+3+5,0.125000\n");
    let rows: Vec<PromptRow> = PROMPT_KINDS.iter().map(|k| PromptRow { kind: k.to_string(), map50: 0.0 }).collect();
    let csv = prompts_csv(&rows);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("kind,map50\ngeneral,"));
}

#[test]
fn bank_file_out_and_short_domain_names() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let out = pgst(d, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["gen-data", "--out", "data", "--seed", "2", "--n-train", "3", "--n-val", "1", "--n-test", "2"]);
    ok(&["train-source", "--data", "data", "--out", "src", "--epochs", "0"]);
    ok(&["fit-style", "--ckpt", "src/model.ckpt", "--data", "data", "--domain", "foggy", "--iters", "2", "--bank-size", "2", "--out", "fit/foggy.json"]);
    assert!(d.join("fit/foggy.json").is_file());
    assert!(d.join("fit/foggy.prompt.json").is_file());
    let runs: Vec<RunManifest> = serde_json::from_str(&fs::read_to_string(d.join("fit/manifest.json")).unwrap()).unwrap();
    assert_eq!(runs[0].outputs.len(), 2);

    ok(&["finetune", "--ckpt", "src/model.ckpt", "--bank", "fit/foggy.json", "--data", "data", "--out", "ft", "--domain", "foggy", "--mode", "prompt", "--epochs", "1", "--max-steps", "1"]);
    ok(&["eval", "--ckpt", "ft/model.ckpt", "--data", "data", "--domain", "foggy", "--out", "ft"]);
    assert!(d.join("ft/eval_daytime_foggy.json").is_file());

    let amb = pgst(d, &["eval", "--ckpt", "ft/model.ckpt", "--data", "data", "--domain", "sunny", "--out", "ft"]);
    assert_eq!(amb.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&amb.stderr).contains("ambiguous"));
}
