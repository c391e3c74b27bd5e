use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lorasb::model::{make_teacher_student_task, TaskSpec};
use lorasb::persist::{load_estimate, read_run_losses};
use lorasb::sign_matrix;

fn lorasb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorasb"))
        .args(args)
        .env_remove("LORASB_WORKERS")
        .output()
        .expect("spawn lorasb")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"{
  "task": {"m": 12, "n": 10, "r_true": 2, "num_samples": 128},
  "train": {"eta": 20.0, "steps": 25, "batch_size": 32},
  "init": {"rank": 2},
  "seeds": [0, 1]
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.in.json");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn params_prints_table_formatting() {
    let o = lorasb(&["params", "mistral7b", "--method", "lora_xs", "--rank", "96"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("2064384") && stdout(&o).contains("2.06 M"));
    let o = lorasb(&["params", "gemma2-9b", "--method", "lora_xs", "--rank", "64"]);
    assert!(stdout(&o).contains("1.20 M"));
    let o = lorasb(&["params", "roberta-large", "--method", "lora", "--rank", "8"]);
    assert!(stdout(&o).contains("2162.69 K"));
}

#[test]
fn params_rejects_bad_inputs_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.layout");
    fs::write(&bad, "layers 2\nq_proj 4096\n").unwrap();
    assert_eq!(lorasb(&["params", bad.to_str().unwrap(), "--rank", "8"]).status.code(), Some(2));
    assert_eq!(lorasb(&["params", "no/such/file", "--rank", "8"]).status.code(), Some(2));
    assert_eq!(lorasb(&["params", "mistral7b", "--method", "dora", "--rank", "8"]).status.code(), Some(2));
    assert_eq!(lorasb(&["params", "roberta-large", "--rank", "2048"]).status.code(), Some(2));
}

#[test]
fn train_writes_aligned_curves_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = lorasb(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", "2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let sb = read_run_losses(&out_a.join("lora_sb_seed0.csv")).unwrap();
    let xs = read_run_losses(&out_a.join("lora_xs_seed0.csv")).unwrap();
    assert_eq!(sb.len(), 25);
    assert!(sb.iter().zip(&xs).all(|(a, b)| a.0 == b.0));
    for name in ["lora_sb_seed1.csv", "lora_xs_seed1.json"] {
        assert_eq!(fs::read(out_a.join(name)).unwrap(), fs::read(out_b.join(name)).unwrap(), "{name}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out_a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    assert!(summary["version"].as_str().unwrap().starts_with('v'));
    // defaults are materialized
    assert_eq!(summary["config"]["init"]["budget_fraction"], 0.001);
    assert_eq!(summary["config"]["train"]["lemma2_check_every"], 10);
}

#[test]
fn train_rejects_zero_steps_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write_config(dir.path(), r#"{"train": {"steps": 0}}"#);
    let o = lorasb(&["train", "--config", &zero, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let typo = write_config(dir.path(), r#"{"trian": {}}"#);
    assert_eq!(lorasb(&["train", "--config", &typo]).status.code(), Some(2));
}

#[test]
fn workers_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("w");
    let run = |env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_lorasb"));
        c.args(["train", "--config", &cfg, "--seed-list", "3", "--workers", "0", "--strict", "--out"])
            .arg(&out);
        match env {
            Some(v) => c.env("LORASB_WORKERS", v),
            None => c.env_remove("LORASB_WORKERS"),
        };
        c.output().unwrap()
    };
    assert_eq!(run(None).status.code(), Some(2));
    let o = run(Some("1"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let config: serde_json::Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["strict"], true);
    assert_eq!(config["seeds"], serde_json::json!([3]));
    assert_eq!(run(Some("many")).status.code(), Some(2));
}

#[test]
fn estimate_dump_has_sign_structure_and_matches_full_batch_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("est");
    let o = lorasb(&["estimate", "--config", &cfg, "--seed-list", "4", "--budget-fraction", "1.0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("128 of 128 samples"));
    let est = load_estimate(&out.join("estimate_seed4/estimate.json")).unwrap();
    let eta = est.eta;
    assert!(est.deltas[0].data().iter().all(|&v| v == eta || v == -eta || v == 0.0));

    // closed form at W0 over every sample: ∂L/∂W = 2/(N·m)·(XW0ᵀ − Y)ᵀX
    let spec = TaskSpec { m: 12, n: 10, r_true: 2, num_samples: 128, seed: 4, ..TaskSpec::default() };
    let task = make_teacher_student_task(&spec).unwrap();
    let resid = task.data.inputs.matmul_t(&task.w0).unwrap().sub(&task.data.targets).unwrap();
    let grad = resid.t_matmul(&task.data.inputs).unwrap();
    assert_eq!(est.deltas[0], sign_matrix(&grad).scale(-eta));

    let again = dir.path().join("est2");
    lorasb(&["estimate", "--config", &cfg, "--seed-list", "4", "--budget-fraction", "1.0", "--out", again.to_str().unwrap()]);
    for f in ["estimate_seed4/estimate.json", "estimate_seed4/delta_w0.csv"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn check_reports_json_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let o = lorasb(&["check", "thm3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("check_report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    let props = &report["reports"][0]["properties"];
    assert_eq!(props[0]["name"], "corrected_scale_invariant");
    assert!(props[1]["detail"]["raw_norm_ratios_first_instance"].is_array());
    assert_eq!(lorasb(&["check", "thm7"]).status.code(), Some(2));
}

#[test]
fn ablate_grid_has_zero_noise_row_equal_to_lora_sb() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("abl");
    let o = lorasb(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap(), "--sigmas", "0,0.001"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("ablation_grid.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# schema=1"));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(
        header,
        [
            "seed",
            "lora_sb",
            "noisy_sb_0e0",
            "noisy_sb_1e-3",
            "kaiming_svd",
            "pissa_style",
            "nonortho_sb_corrected",
            "nonortho_sb_raw"
        ]
    );
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let a: f64 = row[1].parse().unwrap();
        let b: f64 = row[2].parse().unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }
    assert_eq!(rows[2][0], "median");
}
