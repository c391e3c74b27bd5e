//! Report files for whole experiments: per-run curves, summaries, ablation grids.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::{final_losses, median, ArmRun, ExperimentConfig};
use crate::persist::save_run;

/// Bumped whenever the ablation grid layout changes.
pub const GRID_CSV_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    pub arm: String,
    pub seed: u64,
    /// `None` for a diverged run.
    pub final_loss: Option<f64>,
    pub status: String,
    pub files: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    /// Diverged runs count as `+∞`; serialized as `null` when the median is infinite.
    pub median_final_loss: Option<f64>,
    pub diverged: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub arms: Vec<ArmSummary>,
    pub runs: Vec<RunRow>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn summarize(config: &ExperimentConfig, runs: &[ArmRun], version: &str) -> Result<ExperimentSummary> {
    let arms = config
        .arms
        .iter()
        .map(|a| {
            let losses = final_losses(runs, &a.name);
            ArmSummary {
                arm: a.name.clone(),
                median_final_loss: finite(median(&losses)),
                diverged: losses.iter().filter(|l| !l.is_finite()).count(),
            }
        })
        .collect();
    let rows = runs
        .iter()
        .map(|r| RunRow {
            arm: r.arm.clone(),
            seed: r.seed,
            final_loss: finite(r.final_loss()),
            status: match &r.outcome {
                Ok(_) => "completed".into(),
                Err(msg) => format!("diverged: {msg}"),
            },
            files: r.report().map(|_| run_stem(&r.arm, r.seed)),
        })
        .collect();
    Ok(ExperimentSummary {
        version: version.into(),
        config_hash: config.hash()?,
        config: config.clone(),
        arms,
        runs: rows,
    })
}

pub fn run_stem(arm: &str, seed: u64) -> String {
    format!("{arm}_seed{seed}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes one CSV + JSON per completed run, `config.json` with every default
/// filled in, and `summary.json`. Returns the summary.
pub fn write_experiment(config: &ExperimentConfig, runs: &[ArmRun], out: &Path, version: &str) -> Result<ExperimentSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = config.hash()?;
    for r in runs {
        if let Some(report) = r.report() {
            save_run(report, out, &run_stem(&r.arm, r.seed), &r.arm, r.seed, version, &hash)?;
        }
    }
    write_json(&out.join("config.json"), config)?;
    let summary = summarize(config, runs, version)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Final-loss grid: one row per seed, one column per arm, then a `median` row.
/// Diverged runs appear as `inf`.
pub fn write_grid<W: Write>(config: &ExperimentConfig, runs: &[ArmRun], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# schema={GRID_CSV_SCHEMA}").map_err(|e| Error::io("<grid csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::format("<grid csv>", e.to_string());
    let header: Vec<&str> = std::iter::once("seed").chain(config.arms.iter().map(|a| a.name.as_str())).collect();
    w.write_record(&header).map_err(wrap)?;
    let cell = |v: f64| if v.is_finite() { format!("{v:.16e}") } else { "inf".into() };
    for &seed in &config.seeds {
        let mut row = vec![seed.to_string()];
        for arm in &config.arms {
            let v = runs
                .iter()
                .find(|r| r.seed == seed && r.arm == arm.name)
                .map_or(f64::NAN, ArmRun::final_loss);
            row.push(cell(v));
        }
        w.write_record(&row).map_err(wrap)?;
    }
    let mut row = vec!["median".to_string()];
    for arm in &config.arms {
        row.push(cell(median(&final_losses(runs, &arm.name))));
    }
    w.write_record(&row).map_err(wrap)?;
    w.flush().map_err(|e| Error::io("<grid csv>", e))
}

pub fn write_grid_file(config: &ExperimentConfig, runs: &[ArmRun], path: &Path) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_grid(config, runs, std::io::BufWriter::new(file))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::run_experiment;
    use crate::model::TaskSpec;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.task = TaskSpec {
            m: 8,
            n: 6,
            r_true: 2,
            num_samples: 64,
            ..TaskSpec::default()
        };
        c.init.rank = 2;
        c.train.eta = 5.0;
        c.train.steps = 5;
        c.train.batch_size = 16;
        c.seeds = vec![3, 4];
        c
    }

    #[test]
    fn experiment_files_and_grid() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let runs = run_experiment(&c, 1).unwrap();
        let summary = write_experiment(&c, &runs, dir.path(), "v0").unwrap();
        assert_eq!(summary.runs.len(), 4);
        for name in ["config.json", "summary.json", "lora_sb_seed3.csv", "lora_xs_seed4.json"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let mut buf = Vec::new();
        write_grid(&c, &runs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# schema=1");
        assert_eq!(lines[1], "seed,lora_sb,lora_xs");
        assert!(lines[2].starts_with("3,"));
        assert!(lines[4].starts_with("median,"));
    }
}
