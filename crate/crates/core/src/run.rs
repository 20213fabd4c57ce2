//! Run directories: one experiment's config, checkpoints, logs, score dumps,
//! predictions and reports under a single root.
//!
//! ```text
//! <run>/config.toml              the run config as parsed
//! <run>/run.json                 config hash, cost report, checksums, final metrics
//! <run>/checkpoints/<arch>-body.ckpt
//! <run>/checkpoints/head-<id>.ckpt
//! <run>/logs/<arch>-body.csv     epoch,split,loss,accuracy,lr
//! <run>/logs/head-<id>.csv
//! <out>/scores/head-<id>.csv     region_id,image_id,score_0..score_{m-1}
//! <out>/predictions.csv          region_id,label (one row per region)
//! <out>/fused.json               per-region head votes and probabilities
//! <out>/predict.json             config hash and accuracies
//! ```
//!
//! Every checkpoint is tagged with the SHA-256 of the config that produced
//! it. Training resumes from checkpoints whose tag matches and refuses to
//! mix artifacts from different configs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_manifest, Manifest};
use crate::error::{Error, Result};
use crate::fsutil::{write_atomic, write_json};
use crate::fusion::{fuse_dataset, write_score_csv, FusedRegion, ScoreRow};
use crate::micronet::arch::Architecture;
use crate::micronet::checkpoint::Checkpoint;
use crate::micronet::Network;
use crate::trainer::{self, CostReport, HeadConfig, ImageCache, LogRow, RunConfig, TrainingData};

pub const CONFIG_HASH_TAG: &str = "config_hash";
pub const MEANS_TAG: &str = "metadata_means";

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths {
            root: root.to_path_buf(),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn run_json(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn body_checkpoint(&self, arch: Architecture) -> PathBuf {
        self.root.join("checkpoints").join(format!("{arch}-body.ckpt"))
    }

    pub fn head_checkpoint(&self, id: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("head-{id}.ckpt"))
    }

    pub fn body_log(&self, arch: Architecture) -> PathBuf {
        self.root.join("logs").join(format!("{arch}-body.csv"))
    }

    pub fn head_log(&self, id: &str) -> PathBuf {
        self.root.join("logs").join(format!("head-{id}.csv"))
    }
}

/// Where a dataset's manifests and weight table live.
#[derive(Clone, Debug)]
pub struct DataPaths {
    pub train: PathBuf,
    pub eval: Option<PathBuf>,
    pub weights: Option<PathBuf>,
}

impl DataPaths {
    /// `data` is a dataset directory (`train.json`, optional `eval.json` and
    /// `weights.csv`) or a training manifest file.
    pub fn locate(data: &Path) -> Result<Self> {
        let (dir, train) = if data.is_dir() {
            (data.to_path_buf(), data.join("train.json"))
        } else {
            (
                data.parent().map(Path::to_path_buf).unwrap_or_default(),
                data.to_path_buf(),
            )
        };
        if !train.is_file() {
            return Err(Error::Data(format!("training manifest {} not found", train.display())));
        }
        let existing = |p: PathBuf| p.is_file().then_some(p);
        Ok(DataPaths {
            train,
            eval: existing(dir.join("eval.json")),
            weights: existing(dir.join("weights.csv")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub name: String,
    pub checksum: String,
    pub final_train_accuracy: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub classes: Vec<String>,
    pub cost: CostReport,
    pub bodies: Vec<JobSummary>,
    pub heads: Vec<JobSummary>,
}

fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn summarize(name: String, net: &Network, log: &[LogRow]) -> JobSummary {
    let last = |split: &str| log.iter().rev().find(|r| r.split == split).map(|r| r.accuracy);
    JobSummary {
        name,
        checksum: net.checksum(),
        final_train_accuracy: last("train"),
        final_eval_accuracy: last("eval"),
    }
}

/// Loads a checkpoint, refusing one produced by a different config.
pub fn load_checked(path: &Path, config_hash: &str) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    match ckpt.tag(CONFIG_HASH_TAG) {
        Some(found) if found == config_hash => Ok(ckpt),
        found => Err(Error::HashMismatch {
            artifact: path.display().to_string(),
            expected: config_hash.to_string(),
            found: found.unwrap_or("none").to_string(),
        }),
    }
}

fn tagged(net: Network, hash: &str, role: &str, means: &[f64]) -> Result<Checkpoint> {
    Ok(Checkpoint::new(net)
        .with_tag(CONFIG_HASH_TAG, hash)
        .with_tag("role", role)
        .with_tag(MEANS_TAG, serde_json::to_string(means)?))
}

/// Writes `config.toml`, or checks an existing one matches `cfg`.
fn claim_run_dir(paths: &RunPaths, cfg: &RunConfig) -> Result<String> {
    let hash = cfg.hash();
    if paths.config().is_file() {
        let existing = RunConfig::load(&paths.config())?;
        if existing.hash() != hash {
            return Err(Error::HashMismatch {
                artifact: paths.config().display().to_string(),
                expected: hash,
                found: existing.hash(),
            });
        }
    } else {
        write_atomic(&paths.config(), cfg.to_toml()?.as_bytes())?;
    }
    Ok(hash)
}

/// Trains every missing body and head of `cfg` into `out`, reusing
/// checkpoints already there. Returns the run summary also written to
/// `run.json`.
pub fn train_run(cfg: &RunConfig, data: &Path, out: &Path, jobs: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let data_paths = DataPaths::locate(data)?;
    let paths = RunPaths::new(out);
    let hash = claim_run_dir(&paths, cfg)?;

    let train = load_manifest(&data_paths.train)?;
    let eval = data_paths.eval.as_deref().map(load_manifest).transpose()?;
    let train_images = ImageCache::load(&train)?;
    let eval_images = eval.as_ref().map(ImageCache::load).transpose()?;
    let data = TrainingData::new(&train, &train_images, eval.as_ref().zip(eval_images.as_ref()))?;
    let means = data.metadata_means.clone();

    // bodies: resume or train
    let archs = cfg.architectures();
    let mut bodies = BTreeMap::new();
    let mut body_logs = BTreeMap::new();
    let mut missing = Vec::new();
    for &arch in &archs {
        let path = paths.body_checkpoint(arch);
        if path.is_file() {
            let ckpt = load_checked(&path, &hash)?;
            body_logs.insert(arch, read_log(&paths.body_log(arch))?);
            bodies.insert(arch, ckpt.network);
            eprintln!("resuming from {}", path.display());
        } else {
            missing.push(arch);
        }
    }
    let trained = trainer::parallel_map(jobs, &missing, |&arch| {
        let (net, log) = trainer::train_body(cfg, arch, &data)?;
        tagged(net.clone(), &hash, "body", &means)?
            .with_tag("architecture", arch.as_str())
            .save(&paths.body_checkpoint(arch))?;
        trainer::write_log(&paths.body_log(arch), &log)?;
        Ok((arch, net, log))
    })?;
    for (arch, net, log) in trained {
        bodies.insert(arch, net);
        body_logs.insert(arch, log);
    }

    // heads: fork, then resume or fine-tune
    let default_table = data_paths.weights.as_deref();
    let mut head_results: BTreeMap<String, (Network, Vec<LogRow>)> = BTreeMap::new();
    let mut pending = Vec::new();
    for job in trainer::spawn_heads(&bodies, &cfg.heads)? {
        let path = paths.head_checkpoint(&job.config.id);
        if path.is_file() {
            let ckpt = load_checked(&path, &hash)?;
            head_results.insert(
                job.config.id.clone(),
                (ckpt.network, read_log(&paths.head_log(&job.config.id))?),
            );
        } else {
            pending.push(job);
        }
    }
    let trained = trainer::parallel_map(jobs, &pending, |job| {
        let scheme = trainer::resolve_scheme(job.config.weighting, &cfg.weighting, default_table, data.classes())?;
        let (net, log) = trainer::train_head(cfg, job.clone(), &scheme, &data)?;
        let id = &job.config.id;
        tagged(net.clone(), &hash, "head", &means)?
            .with_tag("head_id", id.as_str())
            .with_tag("architecture", job.config.cnn.as_str())
            .with_tag("crop", job.config.crop.as_str())
            .save(&paths.head_checkpoint(id))?;
        trainer::write_log(&paths.head_log(id), &log)?;
        Ok((id.clone(), net, log))
    })?;
    for (id, net, log) in trained {
        head_results.insert(id, (net, log));
    }

    let summary = RunSummary {
        config_hash: hash,
        classes: train.classes.clone(),
        cost: trainer::cost_report(&cfg.plan, &cfg.heads),
        bodies: archs
            .iter()
            .map(|a| summarize(format!("{a}-body"), &bodies[a], &body_logs[a]))
            .collect(),
        heads: cfg
            .heads
            .iter()
            .map(|h| {
                let (net, log) = &head_results[&h.id];
                summarize(format!("head-{}", h.id), net, log)
            })
            .collect(),
    };
    write_json(&paths.run_json(), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub head: String,
    /// Share of regions whose head vote equals the truth label.
    pub region_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub config_hash: String,
    pub regions: usize,
    pub images: usize,
    pub heads: Vec<HeadAccuracy>,
    pub fused_accuracy: f64,
    /// Regions whose vote fell back to false detection.
    pub false_detections: usize,
}

impl PredictSummary {
    pub fn best_head_accuracy(&self) -> f64 {
        self.heads.iter().map(|h| h.region_accuracy).fold(0.0, f64::max)
    }
}

/// Scores every image of `manifest` with one head.
pub fn score_head(
    cfg: &RunConfig,
    head: &HeadConfig,
    net: &Network,
    manifest: &Manifest,
    images: &ImageCache,
    means: &[f64],
) -> Result<Vec<ScoreRow>> {
    let channels = net.input_shape()[2];
    let style = trainer::inference_style(&cfg.crop, head.crop);
    let (samples, _) = trainer::crop_samples(manifest, images, &style, channels, means)?;
    let inputs = trainer::inference_inputs(&samples, net.input_shape()[0])?;
    samples
        .iter()
        .zip(&inputs)
        .map(|(s, x)| {
            Ok(ScoreRow {
                region_id: s.region_id.clone(),
                image_id: s.image_id.clone(),
                scores: net.forward(x, &s.metadata, false, 0)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct FusedFile<'a> {
    config_hash: &'a str,
    heads: Vec<&'a str>,
    regions: &'a [FusedRegion],
}

/// Scores `manifest` with every head of the run at `run_dir`, fuses the
/// votes, and writes score dumps, `predictions.csv`, `fused.json` and
/// `predict.json` under `out`.
pub fn predict_run(run_dir: &Path, manifest_path: &Path, out: &Path, jobs: usize) -> Result<PredictSummary> {
    let paths = RunPaths::new(run_dir);
    let cfg = RunConfig::load(&paths.config())?;
    let hash = cfg.hash();
    let manifest = load_manifest(manifest_path)?;
    let images = ImageCache::load(&manifest)?;
    let missing: Vec<&str> = cfg
        .heads
        .iter()
        .filter(|h| !paths.head_checkpoint(&h.id).is_file())
        .map(|h| h.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing head checkpoints: {missing:?}")));
    }
    let rows = trainer::parallel_map(jobs, &cfg.heads, |head| {
        let ckpt = load_checked(&paths.head_checkpoint(&head.id), &hash)?;
        let means: Vec<f64> = serde_json::from_str(
            ckpt.tag(MEANS_TAG)
                .ok_or_else(|| Error::Data(format!("head {} checkpoint lacks metadata means", head.id)))?,
        )?;
        if ckpt.network.classes() != manifest.class_count() {
            return Err(Error::Data(format!(
                "head {} predicts {} classes, manifest has {}",
                head.id,
                ckpt.network.classes(),
                manifest.class_count()
            )));
        }
        let rows = score_head(&cfg, head, &ckpt.network, &manifest, &images, &means)?;
        write_score_csv(&out.join("scores").join(format!("head-{}.csv", head.id)), &rows)?;
        Ok(rows)
    })?;

    let regions = manifest.group_by_region();
    let fd = manifest.false_detection_index();
    let fused = fuse_dataset(&rows, &regions, fd)?;
    let predictions: Vec<(String, usize)> = fused.iter().map(|f| (f.region_id.clone(), f.label)).collect();
    crate::metrics::write_label_csv(&out.join("predictions.csv"), &predictions)?;
    write_json(
        &out.join("fused.json"),
        &FusedFile {
            config_hash: &hash,
            heads: cfg.heads.iter().map(|h| h.id.as_str()).collect(),
            regions: &fused,
        },
    )?;

    let truth: BTreeMap<String, usize> = manifest.region_labels().into_iter().collect();
    let n = fused.len().max(1) as f64;
    let accuracy = |label: &dyn Fn(&FusedRegion) -> usize| {
        fused.iter().filter(|f| label(f) == truth[&f.region_id]).count() as f64 / n
    };
    let summary = PredictSummary {
        config_hash: hash.clone(),
        regions: fused.len(),
        images: manifest.records.len(),
        heads: cfg
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| HeadAccuracy {
                head: h.id.clone(),
                region_accuracy: accuracy(&|f| f.head_labels[i]),
            })
            .collect(),
        fused_accuracy: accuracy(&|f| f.label),
        false_detections: fused.iter().filter(|f| f.label == fd).count(),
    };
    write_json(&out.join("predict.json"), &summary)?;
    Ok(summary)
}

/// Human-readable summary of a run directory and, when present, its
/// predictions and score report.
pub fn report(run_dir: &Path) -> Result<String> {
    use std::fmt::Write as _;
    let paths = RunPaths::new(run_dir);
    let run: serde_json::Value = serde_json::from_str(&crate::fsutil::read_to_string(&paths.run_json())?)?;
    let mut out = String::new();
    let _ = writeln!(out, "run {}", run_dir.display());
    let _ = writeln!(out, "config hash {}", run["config_hash"].as_str().unwrap_or("?"));
    let cost = &run["cost"];
    let _ = writeln!(
        out,
        "cost: {} architectures, {} heads, hydra {} epochs vs independent {} (ratio {:.3})",
        cost["architectures"],
        cost["heads"],
        cost["hydra_epochs"],
        cost["independent_epochs"],
        cost["ratio"].as_f64().unwrap_or(f64::NAN)
    );
    let fmt = |v: &serde_json::Value| v.as_f64().map_or("-".to_string(), |x| format!("{x:.4}"));
    let _ = writeln!(out, "{:<16} {:>10} {:>10}  checksum", "job", "train acc", "eval acc");
    for job in run["bodies"]
        .as_array()
        .into_iter()
        .chain(run["heads"].as_array())
        .flatten()
    {
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10}  {}",
            job["name"].as_str().unwrap_or("?"),
            fmt(&job["final_train_accuracy"]),
            fmt(&job["final_eval_accuracy"]),
            &job["checksum"].as_str().unwrap_or("?")[..12.min(job["checksum"].as_str().unwrap_or("?").len())]
        );
    }
    let predict = run_dir.join("predict.json");
    if predict.is_file() {
        let p: PredictSummary = serde_json::from_str(&crate::fsutil::read_to_string(&predict)?)?;
        let _ = writeln!(
            out,
            "predictions: {} regions from {} images, fused accuracy {:.4}, best head {:.4}, {} false detections",
            p.regions,
            p.images,
            p.fused_accuracy,
            p.best_head_accuracy(),
            p.false_detections
        );
    }
    let score = run_dir.join("report.json");
    if score.is_file() {
        let s: serde_json::Value = serde_json::from_str(&crate::fsutil::read_to_string(&score)?)?;
        let _ = writeln!(out, "weighted F-measure {}", fmt(&s["fmeasure"]));
    }
    Ok(out)
}
