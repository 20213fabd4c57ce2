//! Procedural stand-in for satellite region imagery.
//!
//! Each class is a shape drawn inside the region box (disc, ring, stripes,
//! cross, ...). The foreground is always brighter than the background, but
//! colours, box size, rotation, brightness, occlusion and pixel noise vary
//! per region and per view, so a classifier has to look at the shape. Box
//! size and background tint carry a weak class signal, like the context
//! around real sites. False-detection regions are background only.
//!
//! A region seen in several images keeps its box and shape; the views differ
//! in nuisance and metadata. Every image also has a half-resolution
//! multi-band companion whose first three bands are the downsampled colour
//! image; extra bands are shape-dependent.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augmentation::BoundingBox;
use crate::dataset::{Manifest, MetadataRecord, Record, Split};
use crate::error::{Error, Result};
use crate::imageio;
use crate::seed;
use crate::tensor::Tensor;

const SHAPES: [&str; 12] = [
    "disc",
    "square_ring",
    "h_stripes",
    "v_stripes",
    "cross",
    "checker",
    "triangle",
    "diag_stripes",
    "annulus",
    "dots",
    "block",
    "saltire",
];

const CONTEXT_LEVEL: f64 = 0.05;

pub const MAX_CLASSES: usize = SHAPES.len();
pub const FALSE_DETECTION_NAME: &str = "false_detection";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Land-use classes, not counting false detection.
    pub classes: usize,
    pub train_regions: usize,
    pub eval_regions: usize,
    pub test_regions: usize,
    /// Exact train region counts per class; overrides `train_regions`.
    pub train_per_class: Option<Vec<usize>>,
    /// Side of the square colour image, in pixels.
    pub image_size: usize,
    pub multi_channels: usize,
    /// Fractions of regions seen in 1, 2, 3, ... images.
    pub multiplicity: Vec<f64>,
    /// Nuisance strength in [0, 1]; 0 disables rotation, occlusion,
    /// brightness jitter and pixel noise.
    pub noise: f64,
    /// Share of eval/test regions that are false detections.
    pub false_detection_fraction: f64,
    /// Probability that gsd or sun elevation is missing.
    pub missing_metadata: f64,
    /// Probability that the mark drawn just outside the box belongs to the
    /// region's class rather than a random one. Only expanded crops see it.
    pub context_reliability: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 8,
            train_regions: 200,
            eval_regions: 100,
            test_regions: 0,
            train_per_class: None,
            image_size: 64,
            multi_channels: 4,
            multiplicity: vec![0.8, 0.1, 0.05, 0.05],
            noise: 0.5,
            false_detection_fraction: 0.0,
            missing_metadata: 0.05,
            context_reliability: 0.75,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("infeasible dataset spec: {msg}")));
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return bad(format!("classes must be in 1..={MAX_CLASSES}, got {}", self.classes));
        }
        if !(24..=1024).contains(&self.image_size) {
            return bad(format!("image_size must be in 24..=1024, got {}", self.image_size));
        }
        if self.multi_channels == 0 || self.multi_channels > 16 {
            return bad(format!("multi_channels must be in 1..=16, got {}", self.multi_channels));
        }
        if self.multiplicity.is_empty() || self.multiplicity.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return bad("multiplicity fractions must be nonnegative".into());
        }
        if (self.multiplicity.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("multiplicity fractions must sum to 1".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        if !(0.0..1.0).contains(&self.false_detection_fraction) {
            return bad(format!(
                "false_detection_fraction {} outside [0, 1)",
                self.false_detection_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.missing_metadata) {
            return bad(format!("missing_metadata {} outside [0, 1]", self.missing_metadata));
        }
        if !(0.0..=1.0).contains(&self.context_reliability) {
            return bad(format!(
                "context_reliability {} outside [0, 1]",
                self.context_reliability
            ));
        }
        if let Some(per) = &self.train_per_class {
            if per.len() != self.classes {
                return bad(format!(
                    "train_per_class has {} entries for {} classes",
                    per.len(),
                    self.classes
                ));
            }
        }
        if self.train_label_counts().iter().sum::<usize>() == 0 {
            return bad("train split is empty".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = SHAPES[..self.classes].iter().map(|s| s.to_string()).collect();
        names.push(FALSE_DETECTION_NAME.into());
        names
    }

    fn train_label_counts(&self) -> Vec<usize> {
        match &self.train_per_class {
            Some(per) => per.clone(),
            None => apportion(self.train_regions, &vec![1.0; self.classes]),
        }
    }

    fn split_regions(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_label_counts().iter().sum(),
            Split::Eval => self.eval_regions,
            Split::Test => self.test_regions,
        }
    }
}

/// Largest-remainder apportionment of `n` items over `weights`.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    // the epsilon absorbs rounding in quotas such as 10 · 0.8 / 1.0000000000000002
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let remainder = |i: usize| quotas[i] - counts[i] as f64;
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps lower indices first among equal remainders
    order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)));
    let short = n.saturating_sub(counts.iter().sum::<usize>());
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Per-class challenge weights for a generated set: 0.6, 1.0 and 1.4 in
/// rotation, 0 for false detection.
pub fn challenge_weights(classes: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..classes).map(|i| [1.0, 0.6, 1.4][i % 3]).collect();
    w.push(0.0);
    w
}

/// Anti-aliased shape coverage at normalised box coordinates.
fn shape_mask(shape: usize, u: f64, v: f64) -> bool {
    if u.abs() > 1.0 || v.abs() > 1.0 {
        return false;
    }
    let r = (u * u + v * v).sqrt();
    let inner = u.abs() < 0.9 && v.abs() < 0.9;
    match shape {
        0 => r < 0.8,
        1 => {
            let m = u.abs().max(v.abs());
            (0.5..0.9).contains(&m)
        }
        2 => inner && (PI * 2.5 * v).sin() > 0.0,
        3 => inner && (PI * 2.5 * u).sin() > 0.0,
        4 => inner && (u.abs() < 0.25 || v.abs() < 0.25),
        5 => inner && (PI * 1.5 * u).sin() * (PI * 1.5 * v).sin() > 0.0,
        6 => v > -0.8 && v < 0.8 && u.abs() < (v + 0.8) / 1.6 * 0.9,
        7 => inner && (PI * 1.6 * (u + v)).sin() > 0.0,
        8 => (0.45..0.85).contains(&r),
        9 => (u.abs() - 0.45).powi(2) + (v.abs() - 0.45).powi(2) < 0.09,
        10 => u.abs() < 0.7 && v.abs() < 0.7,
        11 => inner && (u.abs() - v.abs()).abs() < 0.25,
        _ => false,
    }
}

struct RegionPlan {
    label: usize,
    /// `None` for false detections.
    shape: Option<usize>,
    bbox: BoundingBox,
    fg: [f64; 3],
    tint: [f64; 3],
    /// Class whose context mark surrounds the box.
    context: usize,
    /// Shifts the spectral response of the object.
    response_jitter: f64,
    views: usize,
}

/// Whether box-relative coordinates fall on the context mark of `class`:
/// a bar, dotted bar or double bar beside one of the four box sides,
/// between 0.08 and 0.24 box lengths out.
fn context_mask(class: usize, u: f64, v: f64) -> bool {
    // rotate so the mark always sits left of the box
    let (out, along) = match class % 4 {
        0 => (-u, v),
        1 => (-v, u),
        2 => (u - 1.0, v),
        _ => (v - 1.0, u),
    };
    if !(0.08..=0.24).contains(&out) || !(0.0..=1.0).contains(&along) {
        return false;
    }
    match (class / 4) % 3 {
        0 => true,
        1 => (along * 4.0).floor() as i64 % 2 == 0,
        _ => out <= 0.13 || out >= 0.19,
    }
}

fn rand3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

fn plan_region(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, label: usize, views: usize) -> RegionPlan {
    let s = spec.image_size as f64;
    let shape = (label < spec.classes).then_some(label);
    // class-correlated box size, in [0.2, 0.45] of the image side
    let class_frac = 0.2 + 0.25 * ((label * 5) % 8) as f64 / 7.0;
    let frac = (class_frac + rng.random_range(-0.06..0.06)).clamp(0.15, 0.5);
    let side = (frac * s).round().max(6.0);
    let aspect = 1.0 + rng.random_range(-0.15..0.15);
    let w = (side * aspect).round().clamp(6.0, s / 2.0) as usize;
    let h = (side / aspect).round().clamp(6.0, s / 2.0) as usize;
    let bbox = BoundingBox {
        x: rng.random_range(0..=spec.image_size - w),
        y: rng.random_range(0..=spec.image_size - h),
        w,
        h,
    };
    // weak context cue: classes lean towards one channel
    let mut tint = [0.0; 3];
    tint[label % 3] = 0.06;
    let fg = rand3(rng, 0.6, 0.95);
    let context = if shape.is_some() && rng.random::<f64>() < spec.context_reliability {
        label
    } else {
        rng.random_range(0..spec.classes)
    };
    let response_jitter = rng.random_range(-0.1..0.1);
    RegionPlan {
        label,
        shape,
        bbox,
        fg,
        tint,
        context,
        response_jitter,
        views,
    }
}

struct View {
    pan: Tensor,
    multi: Tensor,
    metadata: MetadataRecord,
}

fn render_view(spec: &SyntheticSpec, plan: &RegionPlan, rng: &mut ChaCha8Rng) -> View {
    let n = spec.image_size;
    let noise = spec.noise;
    let base = rand3(rng, 0.2, 0.42);
    let bg: Vec<f64> = base.iter().zip(plan.tint).map(|(b, t)| b + t).collect();
    // low-frequency texture shared by all channels
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..PI),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let angle = noise * rng.random_range(-PI / 6.0..PI / 6.0);
    let brightness = 1.0 + noise * rng.random_range(-0.3..0.3);
    let occlusion = (rng.random::<f64>() < 0.5 * noise).then(|| {
        let b = plan.bbox;
        let (ow, oh) = ((b.w / 2).max(1), (b.h / 2).max(1));
        (
            b.x + rng.random_range(0..=b.w - ow),
            b.y + rng.random_range(0..=b.h - oh),
            ow,
            oh,
        )
    });
    let pixel_noise = Normal::new(0.0, 0.08 * noise).expect("valid std");

    let b = plan.bbox;
    let (cx, cy) = (b.x as f64 + b.w as f64 / 2.0, b.y as f64 + b.h as f64 / 2.0);
    let (hw, hh) = (b.w as f64 / 2.0, b.h as f64 / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut coverage = vec![0.0; n * n];
    if let Some(shape) = plan.shape {
        for y in b.y.saturating_sub(b.h / 4)..(b.y + b.h + b.h / 4).min(n) {
            for x in b.x.saturating_sub(b.w / 4)..(b.x + b.w + b.w / 4).min(n) {
                let mut hits = 0;
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let (dx, dy) = (x as f64 + ox - cx, y as f64 + oy - cy);
                    let (rx, ry) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                    hits += shape_mask(shape, rx / hw, ry / hh) as u32;
                }
                coverage[y * n + x] = hits as f64 / 4.0;
            }
        }
    }
    if let Some((ox, oy, ow, oh)) = occlusion {
        for y in oy..oy + oh {
            for x in ox..ox + ow {
                coverage[y * n + x] = 0.0;
            }
        }
    }
    let mut pan = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 / n as f64, x as f64 / n as f64);
            let texture: f64 = waves
                .iter()
                .map(|(freq, phase, dir, amp)| {
                    amp * (2.0 * PI * freq * (fx * dir.cos() + fy * dir.sin()) + phase).sin()
                })
                .sum();
            let m = coverage[y * n + x];
            let (u, v) = (
                (x as f64 + 0.5 - b.x as f64) / b.w as f64,
                (y as f64 + 0.5 - b.y as f64) / b.h as f64,
            );
            let mark = context_mask(plan.context, u, v);
            for c in 0..3 {
                let ground = if mark { CONTEXT_LEVEL } else { bg[c] + texture };
                let v = ground * (1.0 - m) + plan.fg[c] * m;
                let v = v * brightness + if noise > 0.0 { pixel_noise.sample(rng) } else { 0.0 };
                pan.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let pan = Tensor::new(vec![n, n, 3], pan).expect("pan shape");
    let multi = render_multi(spec, plan, &pan, &coverage);

    let missing = |rng: &mut ChaCha8Rng, v: f64| (rng.random::<f64>() >= spec.missing_metadata).then_some(v);
    let gsd = 0.3 + 0.1 * (plan.label % 4) as f64 + rng.random_range(0.0..0.4);
    let sun: f64 = rng.random_range(20.0..70.0);
    let metadata = MetadataRecord {
        gsd: missing(rng, (gsd * 1000.0).round() / 1000.0),
        sun_elevation: missing(rng, (sun * 10.0).round() / 10.0),
        month: Some(rng.random_range(1..=12) as f64),
        day_of_week: Some(rng.random_range(0..7) as f64),
        box_w: Some(b.w as f64),
        box_h: Some(b.h as f64),
        image_w: Some(n as f64),
        image_h: Some(n as f64),
    };
    View { pan, multi, metadata }
}

/// Half-resolution bands ordered NIR, red, green, blue, then extra
/// spectral bands, so the first three form a false-colour composite.
/// Spectral bands mix the local brightness with a label-dependent response
/// over the object.
fn render_multi(spec: &SyntheticSpec, plan: &RegionPlan, pan: &Tensor, coverage: &[f64]) -> Tensor {
    let n = spec.image_size;
    let half = n / 2;
    let c = spec.multi_channels;
    let response = |band: usize| {
        let base = 0.2 + 0.6 * (((plan.label + band) * 3) % 7) as f64 / 6.0;
        (base + plan.response_jitter).clamp(0.0, 1.0)
    };
    let mut out = Vec::with_capacity(half * half * c);
    for y in 0..half {
        for x in 0..half {
            let cells = [
                (2 * y, 2 * x),
                (2 * y, 2 * x + 1),
                (2 * y + 1, 2 * x),
                (2 * y + 1, 2 * x + 1),
            ];
            let avg = |f: &dyn Fn(usize, usize) -> f64| cells.iter().map(|&(yy, xx)| f(yy, xx)).sum::<f64>() / 4.0;
            let grey = avg(&|yy, xx| (0..3).map(|ch| pan.at3(yy, xx, ch)).sum::<f64>() / 3.0);
            let cover = avg(&|yy, xx| coverage[yy * n + xx]);
            for band in 0..c {
                let v = match band {
                    1..=3 => avg(&|yy, xx| pan.at3(yy, xx, band - 1)),
                    _ => 0.5 * grey + 0.5 * response(band) * cover,
                };
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![half, half, c], out).expect("multi shape")
}

/// Generated manifests, one per nonempty split.
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub manifests: Vec<Manifest>,
}

/// Writes `{train,eval,test}.json`, images under `images/<split>/`,
/// `truth-<split>.csv` for eval/test, `weights.csv` and `spec.json` to `out`.
/// Eval and test splits with no regions are skipped.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<GeneratedDataset> {
    spec.validate()?;
    let classes = spec.class_names();
    let fd = spec.classes;
    let mut manifests = Vec::new();
    for (split_index, split) in [Split::Train, Split::Eval, Split::Test].into_iter().enumerate() {
        let regions = spec.split_regions(split);
        if regions == 0 && split != Split::Train {
            continue;
        }
        let mut rng = seed::rng(&[seed, split_index as u64]);
        let mut labels: Vec<usize> = match split {
            Split::Train => spec
                .train_label_counts()
                .iter()
                .enumerate()
                .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
                .collect(),
            _ => {
                let fds = (regions as f64 * spec.false_detection_fraction).round() as usize;
                let per = apportion(regions - fds, &vec![1.0; spec.classes]);
                per.iter()
                    .enumerate()
                    .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
                    .chain(std::iter::repeat_n(fd, fds))
                    .collect()
            }
        };
        labels.shuffle(&mut rng);
        let mut views: Vec<usize> = apportion(regions, &spec.multiplicity)
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k + 1, n))
            .collect();
        views.shuffle(&mut rng);

        let dir = Path::new("images").join(split.as_str());
        let mut manifest = Manifest::new(classes.clone(), split);
        for (r, (&label, &count)) in labels.iter().zip(&views).enumerate() {
            let region_id = format!("{}-{r:04}", split.as_str());
            let mut region_rng = seed::rng(&[seed, split_index as u64, r as u64]);
            let plan = plan_region(spec, &mut region_rng, label, count);
            for v in 0..plan.views {
                let image_id = format!("{region_id}-{v}");
                let view = render_view(spec, &plan, &mut region_rng);
                let path = dir.join(format!("{image_id}.png"));
                let multi_path = dir.join(format!("{image_id}.{}", imageio::extension_for(spec.multi_channels)));
                let multi_path = if multi_path == path {
                    dir.join(format!("{image_id}-multi.png"))
                } else {
                    multi_path
                };
                imageio::write_image(&out.join(&path), &view.pan)?;
                imageio::write_image(&out.join(&multi_path), &view.multi)?;
                manifest.records.push(Record {
                    region_id: region_id.clone(),
                    image_id,
                    path,
                    multi_path: Some(multi_path),
                    bbox: plan.bbox,
                    label: plan.label,
                    metadata: view.metadata,
                });
            }
        }
        manifest.root = out.to_path_buf();
        manifest.validate()?;
        manifest.save(&out.join(format!("{}.json", split.as_str())))?;
        if split != Split::Train {
            crate::metrics::write_label_csv(
                &out.join(format!("truth-{}.csv", split.as_str())),
                &manifest.region_labels(),
            )?;
        }
        manifests.push(manifest);
    }
    crate::weighting::write_value_table(&out.join("weights.csv"), "weight", &challenge_weights(spec.classes))?;
    crate::fsutil::write_json(&out.join("spec.json"), &SpecRecord { seed, spec })?;
    Ok(GeneratedDataset { manifests })
}

#[derive(Serialize)]
struct SpecRecord<'a> {
    seed: u64,
    spec: &'a SyntheticSpec,
}
