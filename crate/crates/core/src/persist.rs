//! On-disk formats: JSON manifests that reference CSV matrix files.
//!
//! Matrix file paths inside a manifest are relative to the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterMethod, AdapterState};
use crate::error::{Error, Result};
use crate::init::{OptimizerModel, UpdateEstimate};
use crate::matrix::Matrix;
use crate::model::{LayerSpec, LossKind, ModelStack, TaskSpec};
use crate::train::{RunReport, StepRecord};

/// Bumped whenever the run CSV columns change.
pub const RUN_CSV_SCHEMA: u32 = 1;
pub const RUN_CSV_COLUMNS: [&str; 9] = [
    "step", "loss", "grad_norm", "dl_pred", "dl_real", "subspace_ok", "ortho_b", "ortho_a", "lemma2_dev",
];

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
    pub weights: Vec<String>,
    pub biases: Vec<Option<Vec<f64>>>,
    /// Task the model was built for, when there is one.
    #[serde(default)]
    pub task: Option<TaskSpec>,
}

/// Writes `<stem>.json` plus one `<stem>_w<i>.csv` per layer into `dir`.
pub fn save_model(model: &ModelStack, task: Option<&TaskSpec>, dir: &Path, stem: &str) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let mut weights = Vec::new();
    for (i, w) in model.weights().iter().enumerate() {
        let name = format!("{stem}_w{i}.csv");
        w.save_csv(&dir.join(&name))?;
        weights.push(name);
    }
    let manifest = ModelManifest {
        layers: model.layers().to_vec(),
        loss: model.loss_kind(),
        weights,
        biases: model.biases().to_vec(),
        task: task.copied(),
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_model(manifest_path: &Path) -> Result<(ModelStack, Option<TaskSpec>)> {
    let manifest: ModelManifest = read_json(manifest_path)?;
    let dir = parent(manifest_path);
    let weights = manifest
        .weights
        .iter()
        .map(|f| Matrix::load_csv(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let model = ModelStack::new(manifest.layers, weights, manifest.biases, manifest.loss)?;
    Ok((model, manifest.task))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub method: AdapterMethod,
    pub scale: f64,
    pub rank: usize,
    pub shape: (usize, usize),
    pub w0: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<String>,
}

/// Writes `<stem>.json` and the present factors as `<stem>_<factor>.csv`.
pub fn save_adapter(st: &AdapterState, dir: &Path, stem: &str) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let put = |name: &str, m: Option<&Matrix>| -> Result<Option<String>> {
        m.map(|m| {
            let file = format!("{stem}_{name}.csv");
            m.save_csv(&dir.join(&file)).map(|_| file)
        })
        .transpose()
    };
    let manifest = AdapterManifest {
        method: st.method(),
        scale: st.scale(),
        rank: st.rank(),
        shape: st.w0().shape(),
        w0: put("w0", Some(st.w0()))?.expect("present"),
        delta: put("delta", st.delta())?,
        b: put("b", st.b())?,
        r: put("r", st.r())?,
        a: put("a", st.a())?,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_adapter(manifest_path: &Path) -> Result<AdapterState> {
    let m: AdapterManifest = read_json(manifest_path)?;
    let dir = parent(manifest_path);
    let load = |f: &Option<String>, what: &str| -> Result<Matrix> {
        let f = f
            .as_ref()
            .ok_or_else(|| Error::format(manifest_path.display().to_string(), format!("{} adapter lacks {what}", m.method)))?;
        Matrix::load_csv(&dir.join(f))
    };
    let w0 = Matrix::load_csv(&dir.join(&m.w0))?;
    if w0.shape() != m.shape {
        return Err(Error::format(manifest_path.display().to_string(), "W0 shape disagrees with the manifest"));
    }
    let st = match m.method {
        AdapterMethod::FullFt => {
            let mut st = AdapterState::full_ft(w0);
            st.set_delta(load(&m.delta, "delta")?)?;
            st
        }
        AdapterMethod::Lora => AdapterState::lora(w0, load(&m.b, "B")?, load(&m.a, "A")?, m.scale)?,
        method => AdapterState::frozen_basis(method, w0, load(&m.b, "B")?, load(&m.r, "R")?, load(&m.a, "A")?, m.scale)?,
    };
    if st.rank() != m.rank {
        return Err(Error::format(manifest_path.display().to_string(), "rank disagrees with the factors"));
    }
    Ok(st)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateManifest {
    pub optimizer_model: OptimizerModel,
    pub eta: f64,
    pub samples_used: usize,
    pub deltas: Vec<String>,
}

/// Writes one `delta_w<i>.csv` per layer and `estimate.json` into `dir`.
pub fn save_estimate(est: &UpdateEstimate, dir: &Path) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let mut deltas = Vec::new();
    for (i, d) in est.deltas.iter().enumerate() {
        let name = format!("delta_w{i}.csv");
        d.save_csv(&dir.join(&name))?;
        deltas.push(name);
    }
    let manifest = EstimateManifest {
        optimizer_model: est.optimizer_model,
        eta: est.eta,
        samples_used: est.samples_used,
        deltas,
    };
    let path = dir.join("estimate.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_estimate(manifest_path: &Path) -> Result<UpdateEstimate> {
    let m: EstimateManifest = read_json(manifest_path)?;
    let dir = parent(manifest_path);
    let deltas = m
        .deltas
        .iter()
        .map(|f| Matrix::load_csv(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok(UpdateEstimate {
        deltas,
        samples_used: m.samples_used,
        optimizer_model: m.optimizer_model,
        eta: m.eta,
    })
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// Per-step records as CSV, preceded by a `# schema=<n>` line.
pub fn write_run_csv<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# schema={RUN_CSV_SCHEMA}").map_err(|e| Error::io("<run csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::format("<run csv>", e.to_string());
    w.write_record(RUN_CSV_COLUMNS).map_err(wrap)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            format!("{:.16e}", r.loss),
            format!("{:.16e}", r.grad_norm),
            format!("{:.16e}", r.dl_pred),
            format!("{:.16e}", r.dl_real),
            r.subspace_ok.map(|b| u8::from(b).to_string()).unwrap_or_default(),
            opt_num(r.ortho_b),
            opt_num(r.ortho_a),
            opt_num(r.lemma2_dev),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<run csv>", e))
}

/// Reads the `(step, loss)` columns back from a run CSV, checking the schema line.
pub fn read_run_losses(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (head, body) = text.split_once('\n').unwrap_or((&text, ""));
    if head.trim() != format!("# schema={RUN_CSV_SCHEMA}") {
        return Err(Error::format(path.display().to_string(), format!("unsupported schema line {head:?}")));
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let step = rec[0].parse().map_err(|_| Error::format(path.display().to_string(), "bad step"))?;
        let loss = rec[1].parse().map_err(|_| Error::format(path.display().to_string(), "bad loss"))?;
        out.push((step, loss));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary<'a> {
    pub arm: &'a str,
    pub seed: u64,
    pub version: &'a str,
    pub config_hash: &'a str,
    pub train_config: &'a crate::train::TrainConfig,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_update_norms: Vec<f64>,
    pub init_samples_used: usize,
    pub csv: String,
}

/// Writes `<stem>.csv` and `<stem>.json` for one run.
pub fn save_run(report: &RunReport, dir: &Path, stem: &str, arm: &str, seed: u64, version: &str, config_hash: &str) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let csv_name = format!("{stem}.csv");
    let csv_path = dir.join(&csv_name);
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_run_csv(&report.records, std::io::BufWriter::new(file))?;
    let summary = RunSummary {
        arm,
        seed,
        version,
        config_hash,
        train_config: &report.config,
        steps: report.records.len(),
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        final_update_norms: report.final_updates.iter().map(Matrix::frob_norm).collect(),
        init_samples_used: report.init_samples_used,
        csv: csv_name,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &summary)?;
    Ok(path)
}
