//! Body training, forking into heads, head fine-tuning and cost accounting.
//!
//! One body is trained per architecture with an unweighted loss, flip-only
//! augmentation and the expanded pan crop. Each head starts from an exact
//! copy of its architecture's body (fully connected layers included) with a
//! fresh optimizer state, then fine-tunes with its own crop, augmentation and
//! class weighting under the piecewise-constant head schedule.
//!
//! Every job draws its shuffles, augmentations and dropout masks from seeds
//! derived from the plan seed and the job's identity, so results do not
//! depend on how many jobs run at once.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{self, AugmentPolicy, BoundingBox, Crop, CropKind, CropStyle};
use crate::dataset::{metadata_vector, Manifest, RegionSample};
use crate::error::{Error, Result};
use crate::fusion::argmax;
use crate::imageio;
use crate::micronet::arch::{build_network, Architecture, ModelConfig};
use crate::micronet::{Adam, AdamState, Network};
use crate::seed;
use crate::tensor::Tensor;
use crate::weighting::{FmowWeightTable, SchemeName, WeightScheme};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPhase {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub body_epochs: usize,
    pub head_epochs: usize,
    pub body_lr: f64,
    pub head_lr_schedule: Vec<LrPhase>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            body_epochs: 6,
            head_epochs: 5,
            body_lr: 1e-4,
            head_lr_schedule: vec![
                LrPhase { epochs: 1, lr: 1e-4 },
                LrPhase { epochs: 3, lr: 1e-5 },
                LrPhase { epochs: 1, lr: 1e-6 },
            ],
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let scheduled: usize = self.head_lr_schedule.iter().map(|p| p.epochs).sum();
        if scheduled != self.head_epochs {
            return Err(Error::Config(format!(
                "head schedule covers {scheduled} epochs, head_epochs is {}",
                self.head_epochs
            )));
        }
        let lrs = std::iter::once(self.body_lr).chain(self.head_lr_schedule.iter().map(|p| p.lr));
        if lrs.into_iter().any(|lr| !(lr.is_finite() && lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Head learning rate for 0-based head epoch `head_epoch`.
pub fn lr_at(plan: &TrainPlan, head_epoch: usize) -> Result<f64> {
    let mut start = 0;
    for phase in &plan.head_lr_schedule {
        if head_epoch < start + phase.epochs {
            return Ok(phase.lr);
        }
        start += phase.epochs;
    }
    Err(Error::InvalidArgument(format!(
        "head epoch {head_epoch} outside a {start}-epoch schedule"
    )))
}

/// An augmentation preset name (`none`, `flip`, `zoom`, `shift`) or an
/// explicit policy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AugmentSpec {
    Preset(String),
    Policy(AugmentPolicy),
}

impl AugmentSpec {
    pub fn policy(&self) -> Result<AugmentPolicy> {
        let p = match self {
            AugmentSpec::Preset(name) => AugmentPolicy::preset(name)?,
            AugmentSpec::Policy(p) => *p,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub id: String,
    pub cnn: Architecture,
    pub crop: CropKind,
    pub augment: AugmentSpec,
    pub weighting: SchemeName,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSettings {
    pub expansion_factor: f64,
    /// Training-time minimum side for multi-band crops.
    pub min_size: usize,
}

impl Default for CropSettings {
    fn default() -> Self {
        CropSettings {
            expansion_factor: 2.0,
            min_size: 96,
        }
    }
}

impl CropSettings {
    pub fn style(&self, kind: CropKind) -> CropStyle {
        CropStyle {
            kind,
            expansion_factor: self.expansion_factor,
            min_size: self.min_size,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightingSettings {
    /// Challenge weight table (`label_index,weight`); defaults to
    /// `weights.csv` next to the training manifest.
    pub fmow_table: Option<PathBuf>,
    /// Per-class multipliers for `frequency-manual`; all ones when absent.
    pub manual_multipliers: Option<Vec<f64>>,
}

/// Plan, model sizes and head roster: everything a run needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub plan: TrainPlan,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub crop: CropSettings,
    #[serde(default)]
    pub weighting: WeightingSettings,
    pub heads: Vec<HeadConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::fsutil::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.heads.is_empty() {
            return Err(Error::Config("roster has no heads".into()));
        }
        let mut ids = BTreeSet::new();
        for h in &self.heads {
            if h.id.is_empty() || !h.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(Error::Config(format!("head id {:?} must be alphanumeric", h.id)));
            }
            if !ids.insert(&h.id) {
                return Err(Error::Config(format!("head id {} used twice", h.id)));
            }
            h.augment.policy()?;
        }
        if !(self.crop.expansion_factor >= 1.0 && self.crop.expansion_factor.is_finite()) {
            return Err(Error::Config("crop expansion_factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Architectures with at least one head, in a fixed order.
    pub fn architectures(&self) -> Vec<Architecture> {
        self.heads
            .iter()
            .map(|h| h.cnn)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// SHA-256 of the canonical JSON form; tags every artifact of a run.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// The twelve-head roster: eight densely-connected and four residual heads
/// over crop style × augmentation × class weighting.
pub fn default_roster() -> Vec<HeadConfig> {
    use Architecture::{Dense, Residual};
    use CropKind::{ExtMulti, ExtPan, OrigPan};
    use SchemeName::{Fmow, Frequency, FrequencyManual, Unweighted};
    let rows = [
        (Dense, ExtPan, "flip", Unweighted),
        (Dense, OrigPan, "flip", FrequencyManual),
        (Dense, ExtMulti, "flip", FrequencyManual),
        (Dense, ExtPan, "zoom", Frequency),
        (Dense, ExtPan, "shift", Unweighted),
        (Dense, ExtMulti, "shift", Fmow),
        (Dense, ExtPan, "flip", Frequency),
        (Dense, OrigPan, "flip", Frequency),
        (Residual, ExtPan, "flip", Unweighted),
        (Residual, ExtMulti, "flip", FrequencyManual),
        (Residual, OrigPan, "flip", FrequencyManual),
        (Residual, ExtMulti, "flip", Frequency),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(cnn, crop, augment, weighting))| HeadConfig {
            id: format!("{:02}", i + 1),
            cnn,
            crop,
            augment: AugmentSpec::Preset(augment.into()),
            weighting,
            seed: i as u64 + 1,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub architectures: usize,
    pub heads: usize,
    pub body_epochs: usize,
    pub head_epochs: usize,
    /// A·body_epochs + H·head_epochs
    pub hydra_epochs: usize,
    /// H·(body_epochs + head_epochs)
    pub independent_epochs: usize,
    pub ratio: f64,
}

pub fn cost_report(plan: &TrainPlan, roster: &[HeadConfig]) -> CostReport {
    let a = roster.iter().map(|h| h.cnn).collect::<BTreeSet<_>>().len();
    let h = roster.len();
    let hydra = a * plan.body_epochs + h * plan.head_epochs;
    let independent = h * (plan.body_epochs + plan.head_epochs);
    CostReport {
        architectures: a,
        heads: h,
        body_epochs: plan.body_epochs,
        head_epochs: plan.head_epochs,
        hydra_epochs: hydra,
        independent_epochs: independent,
        ratio: if hydra == 0 {
            1.0
        } else {
            independent as f64 / hydra as f64
        },
    }
}

/// Colour and multi-band images of a manifest, keyed by relative path.
#[derive(Clone, Debug, Default)]
pub struct ImageCache {
    images: HashMap<PathBuf, Tensor>,
}

impl ImageCache {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let paths: BTreeSet<&PathBuf> = manifest
            .records
            .iter()
            .flat_map(|r| std::iter::once(&r.path).chain(r.multi_path.as_ref()))
            .collect();
        let images = paths
            .into_par_iter()
            .map(|p| Ok((p.clone(), imageio::read_image(&manifest.resolve(p))?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(ImageCache { images })
    }

    fn get(&self, path: &Path) -> Result<&Tensor> {
        self.images
            .get(path)
            .ok_or_else(|| Error::Data(format!("image {} not loaded", path.display())))
    }
}

/// Maps a box from colour-image pixels onto an image `scale` times as large.
fn scale_box(b: BoundingBox, scale: f64) -> BoundingBox {
    let x0 = (b.x as f64 * scale).floor() as usize;
    let y0 = (b.y as f64 * scale).floor() as usize;
    let x1 = ((b.x + b.w) as f64 * scale).ceil() as usize;
    let y1 = ((b.y + b.h) as f64 * scale).ceil() as usize;
    BoundingBox {
        x: x0,
        y: y0,
        w: (x1 - x0).max(1),
        h: (y1 - y0).max(1),
    }
}

fn first_channels(t: Tensor, channels: usize) -> Result<Tensor> {
    let (h, w, c) = t.hwc()?;
    if c == channels {
        return Ok(t);
    }
    if c < channels {
        return Err(Error::Data(format!("image has {c} bands, network expects {channels}")));
    }
    let data = t
        .data()
        .chunks_exact(c)
        .flat_map(|px| px[..channels].iter().copied())
        .collect();
    Tensor::new(vec![h, w, channels], data)
}

/// Crops every record of `manifest` with `style`. Multi-band styles read the
/// record's multi-band image, keeping its first `channels` bands. Returns the
/// accepted samples and the number rejected by the minimum-size rule.
pub fn crop_samples(
    manifest: &Manifest,
    images: &ImageCache,
    style: &CropStyle,
    channels: usize,
    metadata_means: &[f64],
) -> Result<(Vec<RegionSample>, usize)> {
    let mut samples = Vec::with_capacity(manifest.records.len());
    let mut rejected = 0;
    for r in &manifest.records {
        let pan = images.get(&r.path)?;
        let (image, bbox) = if style.kind == CropKind::ExtMulti {
            let path = r.multi_path.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "region {} image {} has no multi-band image",
                    r.region_id, r.image_id
                ))
            })?;
            let multi = images.get(path)?;
            let scale = multi.hwc()?.1 as f64 / pan.hwc()?.1 as f64;
            (multi, scale_box(r.bbox, scale))
        } else {
            (pan, r.bbox)
        };
        let crop = match augmentation::crop_region(image, bbox, style)
            .map_err(|e| Error::Data(format!("region {} image {}: {e}", r.region_id, r.image_id)))?
        {
            Crop::Accepted(t) => t,
            Crop::Rejected { .. } => {
                rejected += 1;
                continue;
            }
        };
        samples.push(RegionSample {
            region_id: r.region_id.clone(),
            image_id: r.image_id.clone(),
            pixels: first_channels(crop, channels)?,
            bbox: r.bbox,
            label: r.label,
            metadata: metadata_vector(&r.metadata, metadata_means)?.into_data(),
        });
    }
    Ok((samples, rejected))
}

/// Network input from a resized crop: pixel values centred on 0.
pub fn network_input(resized: &Tensor) -> Tensor {
    resized.map(|v| v - 0.5)
}

/// Resizes crops for evaluation or inference.
pub fn inference_inputs(samples: &[RegionSample], side: usize) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| Ok(network_input(&augmentation::resize_bilinear(&s.pixels, side, side)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::fsutil::write_atomic(path, &bytes)
}

/// Evaluation samples already resized for one crop style.
pub struct EvalSet {
    pub samples: Vec<RegionSample>,
    pub inputs: Vec<Tensor>,
}

/// Mean unweighted loss and accuracy over single images.
pub fn evaluate(net: &Network, set: &EvalSet) -> Result<(f64, f64)> {
    if set.samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, x) in set.samples.iter().zip(&set.inputs) {
        let scores = net.forward(x, &s.metadata, false, 0)?;
        loss += crate::micronet::softmax_cross_entropy(&scores, s.label, 1.0)?;
        correct += (argmax(&scores) == s.label) as usize;
    }
    let n = set.samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// What one training job (a body or a head) does each epoch.
pub struct Job<'a> {
    pub name: String,
    pub seed: u64,
    pub policy: AugmentPolicy,
    pub class_weights: Vec<f64>,
    /// Learning rate of each epoch; its length is the epoch count.
    pub lrs: Vec<f64>,
    pub batch_size: usize,
    pub train: &'a [RegionSample],
    pub eval: Option<&'a EvalSet>,
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Runs a job's epochs on `net` in place, returning its log.
pub fn fit(net: &mut Network, job: &Job) -> Result<Vec<LogRow>> {
    use rand::seq::SliceRandom;
    let side = net.input_shape()[0];
    let adam = Adam::default();
    let mut state = AdamState::new(net.params());
    let mut log = Vec::new();
    let diverged = |epoch: usize| Error::Divergence {
        job: job.name.clone(),
        epoch,
    };
    for (epoch, &lr) in job.lrs.iter().enumerate() {
        let mut order: Vec<usize> = (0..job.train.len()).collect();
        order.shuffle(&mut seed::rng(&[job.seed, SHUFFLE_STREAM, epoch as u64]));
        let (mut total_loss, mut correct) = (0.0, 0);
        for (b, batch) in order.chunks(job.batch_size).enumerate() {
            let mut sum: Option<Vec<Tensor>> = None;
            for (k, &i) in batch.iter().enumerate() {
                let sample = augmentation::augment_sample(&job.train[i], &job.policy, epoch as u64, job.seed, side)?;
                let x = network_input(&sample.pixels);
                let dropout = seed::derive(&[job.seed, DROPOUT_STREAM, epoch as u64, (b * job.batch_size + k) as u64]);
                let (loss, grads, scores) = net
                    .backward_scored(&x, &sample.metadata, sample.label, &job.class_weights, Some(dropout))
                    .map_err(|e| match e {
                        Error::NonFinite { .. } => diverged(epoch),
                        other => other,
                    })?;
                if !loss.is_finite() {
                    return Err(diverged(epoch));
                }
                total_loss += loss;
                correct += (argmax(&scores) == sample.label) as usize;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = sum.expect("batches are nonempty");
            grads.iter_mut().for_each(|g| g.scale(1.0 / batch.len() as f64));
            adam.step(net.params_mut(), &grads, &mut state, lr)?;
            if net.params().iter().any(|p| !p.is_finite()) {
                return Err(diverged(epoch));
            }
        }
        let n = job.train.len().max(1) as f64;
        log.push(LogRow {
            epoch: epoch + 1,
            split: "train".into(),
            loss: total_loss / n,
            accuracy: correct as f64 / n,
            lr,
        });
        if let Some(eval) = job.eval {
            let (loss, accuracy) = evaluate(net, eval)?;
            log.push(LogRow {
                epoch: epoch + 1,
                split: "eval".into(),
                loss,
                accuracy,
                lr,
            });
        }
    }
    Ok(log)
}

/// Training and (optional) evaluation data shared by every job of a run.
pub struct TrainingData<'a> {
    pub train: &'a Manifest,
    pub eval: Option<&'a Manifest>,
    pub train_images: &'a ImageCache,
    pub eval_images: Option<&'a ImageCache>,
    pub metadata_means: Vec<f64>,
    pub channels: usize,
}

impl<'a> TrainingData<'a> {
    pub fn new(
        train: &'a Manifest,
        train_images: &'a ImageCache,
        eval: Option<(&'a Manifest, &'a ImageCache)>,
    ) -> Result<Self> {
        if train.records.is_empty() {
            return Err(Error::Data("training manifest has no records".into()));
        }
        if let Some((e, _)) = eval {
            if e.classes != train.classes {
                return Err(Error::Data("train and eval manifests list different classes".into()));
            }
        }
        let channels = train_images.get(&train.records[0].path)?.hwc()?.2;
        Ok(TrainingData {
            train,
            eval: eval.map(|(m, _)| m),
            train_images,
            eval_images: eval.map(|(_, i)| i),
            metadata_means: train.metadata_means(),
            channels,
        })
    }

    pub fn classes(&self) -> usize {
        self.train.class_count()
    }

    fn train_samples(&self, style: &CropStyle) -> Result<Vec<RegionSample>> {
        let (samples, _) = crop_samples(
            self.train,
            self.train_images,
            style,
            self.channels,
            &self.metadata_means,
        )?;
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "every training crop was rejected for {} (min_size {})",
                style.kind, style.min_size
            )));
        }
        Ok(samples)
    }

    fn eval_set(&self, kind: CropKind, crop: &CropSettings, side: usize) -> Result<Option<EvalSet>> {
        let (Some(m), Some(images)) = (self.eval, self.eval_images) else {
            return Ok(None);
        };
        let style = inference_style(crop, kind);
        let (samples, _) = crop_samples(m, images, &style, self.channels, &self.metadata_means)?;
        let inputs = inference_inputs(&samples, side)?;
        Ok(Some(EvalSet { samples, inputs }))
    }
}

/// Inference crops are never rejected: every region needs a prediction.
pub fn inference_style(crop: &CropSettings, kind: CropKind) -> CropStyle {
    CropStyle {
        min_size: 0,
        ..crop.style(kind)
    }
}

pub fn body_job_seed(plan: &TrainPlan, arch: Architecture) -> u64 {
    seed::derive(&[plan.seed, seed::hash_str("body"), seed::hash_str(arch.as_str())])
}

pub fn head_job_seed(plan: &TrainPlan, head: &HeadConfig) -> u64 {
    seed::derive(&[plan.seed, seed::hash_str("head"), seed::hash_str(&head.id), head.seed])
}

/// Freshly initialised network for `arch`.
pub fn init_body(cfg: &RunConfig, arch: Architecture, channels: usize, classes: usize) -> Result<Network> {
    let mut net = build_network(arch, &cfg.model, channels, crate::dataset::METADATA_WIDTH, classes)?;
    net.init_he(seed::derive(&[
        cfg.plan.seed,
        seed::hash_str("init"),
        seed::hash_str(arch.as_str()),
    ]));
    Ok(net)
}

pub fn train_body(cfg: &RunConfig, arch: Architecture, data: &TrainingData) -> Result<(Network, Vec<LogRow>)> {
    let mut net = init_body(cfg, arch, data.channels, data.classes())?;
    let style = cfg.crop.style(CropKind::ExtPan);
    let train = data.train_samples(&style)?;
    let eval = data.eval_set(CropKind::ExtPan, &cfg.crop, cfg.model.input_size)?;
    let job = Job {
        name: format!("{arch}-body"),
        seed: body_job_seed(&cfg.plan, arch),
        policy: AugmentPolicy::flips(),
        class_weights: vec![1.0; data.classes()],
        lrs: vec![cfg.plan.body_lr; cfg.plan.body_epochs],
        batch_size: cfg.plan.batch_size,
        train: &train,
        eval: eval.as_ref(),
    };
    let log = fit(&mut net, &job)?;
    Ok((net, log))
}

/// A head ready to fine-tune: its config and an exact copy of its body.
#[derive(Clone, Debug)]
pub struct HeadJob {
    pub config: HeadConfig,
    pub network: Network,
}

pub fn spawn_heads(bodies: &BTreeMap<Architecture, Network>, roster: &[HeadConfig]) -> Result<Vec<HeadJob>> {
    roster
        .iter()
        .map(|h| {
            let body = bodies
                .get(&h.cnn)
                .ok_or_else(|| Error::Config(format!("head {} needs a {} body, none trained", h.id, h.cnn)))?;
            Ok(HeadJob {
                config: h.clone(),
                network: body.clone(),
            })
        })
        .collect()
}

/// Loss weights a head trains with.
pub fn resolve_scheme(
    name: SchemeName,
    settings: &WeightingSettings,
    default_table: Option<&Path>,
    classes: usize,
) -> Result<WeightScheme> {
    Ok(match name {
        SchemeName::Unweighted => WeightScheme::Unweighted,
        SchemeName::Frequency => WeightScheme::FrequencyBalanced,
        SchemeName::FrequencyManual => WeightScheme::FrequencyManual(
            settings
                .manual_multipliers
                .clone()
                .unwrap_or_else(|| vec![1.0; classes]),
        ),
        SchemeName::Fmow => {
            let path = settings
                .fmow_table
                .as_deref()
                .or(default_table)
                .ok_or_else(|| Error::Config("fmow weighting needs a weight table".into()))?;
            WeightScheme::FmowWeights(FmowWeightTable::load(path)?)
        }
    })
}

pub fn train_head(
    cfg: &RunConfig,
    job: HeadJob,
    scheme: &WeightScheme,
    data: &TrainingData,
) -> Result<(Network, Vec<LogRow>)> {
    let head = &job.config;
    let class_weights =
        crate::weighting::training_weights(scheme, &data.train.class_counts(), data.train.false_detection_index())?;
    let style = cfg.crop.style(head.crop);
    let train = data.train_samples(&style)?;
    let eval = data.eval_set(head.crop, &cfg.crop, cfg.model.input_size)?;
    let lrs = (0..cfg.plan.head_epochs)
        .map(|e| lr_at(&cfg.plan, e))
        .collect::<Result<Vec<_>>>()?;
    let mut net = job.network;
    let fit_job = Job {
        name: format!("head-{}", head.id),
        seed: head_job_seed(&cfg.plan, head),
        policy: head.augment.policy()?,
        class_weights,
        lrs,
        batch_size: cfg.plan.batch_size,
        train: &train,
        eval: eval.as_ref(),
    };
    let log = fit(&mut net, &fit_job)?;
    Ok((net, log))
}

/// Runs `f` over `items` on a pool of `jobs` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(
    jobs: usize,
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync + Send,
) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}
