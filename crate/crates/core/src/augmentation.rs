//! Label-preserving geometric augmentation and crop extraction.
//!
//! Every transform is purely geometric: pixels are moved, mirrored or
//! bilinearly interpolated from their neighbours, never recoloured, so a
//! constant image stays exactly constant. Randomness comes only from the
//! seed arguments; `augment_sample` keys its draws on (seed, epoch, sample)
//! so every epoch sees fresh transforms.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RegionSample;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

fn require_hwc(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    t.hwc()
        .map_err(|_| Error::InvalidArgument(format!("{op} needs an H×W×C tensor, got shape {:?}", t.shape())))
}

pub fn flip(t: &Tensor, axis: Axis) -> Result<Tensor> {
    let (h, w, c) = require_hwc(t, "flip")?;
    Ok(remap(t, h, w, c, |y, x| match axis {
        Axis::Horizontal => (y, w - 1 - x),
        Axis::Vertical => (h - 1 - y, x),
    }))
}

fn remap(t: &Tensor, h: usize, w: usize, c: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let mut out = Vec::with_capacity(h * w * c);
    let data = t.data();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let base = (sy * t.shape()[1] + sx) * c;
            out.extend_from_slice(&data[base..base + c]);
        }
    }
    Tensor::new(vec![h, w, c], out).expect("remap keeps a valid shape")
}

/// Bilinear sample at fractional (y, x), clamping coordinates to the image.
/// Uses the `a + (b − a)·t` form so equal neighbours give back exactly `a`.
fn sample_bilinear(t: &Tensor, y: f64, x: f64, out: &mut Vec<f64>) {
    let (h, w, c) = t.hwc().expect("callers check the rank");
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let d = t.data();
    let px = |yy: usize, xx: usize, ch: usize| d[(yy * w + xx) * c + ch];
    for ch in 0..c {
        let top = lerp(px(y0, x0, ch), px(y0, x1, ch), tx);
        let bottom = lerp(px(y1, x0, ch), px(y1, x1, ch), tx);
        out.push(lerp(top, bottom, ty));
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = require_hwc(t, "resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be positive".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        for x in 0..out_w {
            sample_bilinear(t, (y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5, &mut out);
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Rescales about the image centre by `factor` (> 1 magnifies) and keeps the
/// original shape: magnification crops, reduction pads by edge replication.
pub fn zoom(t: &Tensor, factor: f64) -> Result<Tensor> {
    let (h, w, c) = require_hwc(t, "zoom")?;
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!("zoom factor {factor}")));
    }
    if factor == 1.0 {
        return Ok(t.clone());
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            sample_bilinear(
                t,
                cy + (y as f64 - cy) / factor,
                cx + (x as f64 - cx) / factor,
                &mut out,
            );
        }
    }
    Tensor::new(vec![h, w, c], out)
}

fn check_zoom_range(range: [f64; 2]) -> Result<()> {
    let [lo, hi] = range;
    if lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "zoom range [{lo}, {hi}] must satisfy 0 < lo <= 1 <= hi"
        )))
    }
}

fn check_shift_frac(f: f64) -> Result<()> {
    if (0.0..0.5).contains(&f) {
        Ok(())
    } else {
        Err(Error::Config(format!("shift fraction {f} must lie in [0, 0.5)")))
    }
}

fn draw_zoom(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

pub fn random_zoom(t: &Tensor, zoom_range: [f64; 2], seed: u64) -> Result<Tensor> {
    check_zoom_range(zoom_range)?;
    zoom(t, draw_zoom(&mut seed::rng(&[seed]), zoom_range))
}

/// Translates content by (dx, dy) pixels, replicating edge pixels into the
/// uncovered border.
pub fn shift(t: &Tensor, dx: i64, dy: i64) -> Result<Tensor> {
    let (h, w, c) = require_hwc(t, "shift")?;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    Ok(remap(t, h, w, c, |y, x| {
        (clamp(y as i64 - dy, h), clamp(x as i64 - dx, w))
    }))
}

fn shift_pixels(u: f64, frac: f64, side: usize) -> i64 {
    (u * frac * side as f64).round() as i64
}

pub fn random_shift(t: &Tensor, shift_frac: f64, seed: u64) -> Result<Tensor> {
    check_shift_frac(shift_frac)?;
    let (h, w, _) = require_hwc(t, "shift")?;
    let mut rng = seed::rng(&[seed]);
    let (ux, uy) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
    shift(t, shift_pixels(ux, shift_frac, w), shift_pixels(uy, shift_frac, h))
}

/// Pixel box `(x, y)` top-left, `w × h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropKind {
    /// The annotated box on the panchromatic-resolution image.
    OrigPan,
    /// The box expanded around its centre, panchromatic image.
    ExtPan,
    /// The expanded box on the lower-resolution multi-band image.
    ExtMulti,
}

impl CropKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CropKind::OrigPan => "orig-pan",
            CropKind::ExtPan => "ext-pan",
            CropKind::ExtMulti => "ext-multi",
        }
    }
}

impl fmt::Display for CropKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CropKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "orig-pan" => Ok(CropKind::OrigPan),
            "ext-pan" => Ok(CropKind::ExtPan),
            "ext-multi" => Ok(CropKind::ExtMulti),
            other => Err(Error::Config(format!("unknown crop style {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropStyle {
    pub kind: CropKind,
    /// Side multiplier for the expanded styles.
    pub expansion_factor: f64,
    /// Multi-band crops narrower or shorter than this are rejected.
    pub min_size: usize,
}

impl CropStyle {
    pub fn new(kind: CropKind) -> Self {
        CropStyle {
            kind,
            expansion_factor: 2.0,
            min_size: 96,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Crop {
    Accepted(Tensor),
    Rejected { width: usize, height: usize },
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` a style selects, clipped to a
/// `width × height` image.
pub fn crop_bounds(
    bbox: BoundingBox,
    style: &CropStyle,
    width: usize,
    height: usize,
) -> Result<(usize, usize, usize, usize)> {
    if bbox.w == 0 || bbox.h == 0 {
        return Err(Error::InvalidArgument(format!("degenerate box {bbox:?}")));
    }
    let (x0, y0, x1, y1) = match style.kind {
        CropKind::OrigPan => (bbox.x, bbox.y, bbox.x + bbox.w, bbox.y + bbox.h),
        CropKind::ExtPan | CropKind::ExtMulti => {
            if !(style.expansion_factor >= 1.0 && style.expansion_factor.is_finite()) {
                return Err(Error::Config(format!(
                    "expansion factor {} must be >= 1",
                    style.expansion_factor
                )));
            }
            let grow = |start: usize, len: usize| {
                let centre = start as f64 + len as f64 / 2.0;
                let half = len as f64 * style.expansion_factor / 2.0;
                (
                    (centre - half).round().max(0.0) as usize,
                    (centre + half).round() as usize,
                )
            };
            let (x0, x1) = grow(bbox.x, bbox.w);
            let (y0, y1) = grow(bbox.y, bbox.h);
            (x0, y0, x1, y1)
        }
    };
    let (x1, y1) = (x1.min(width), y1.min(height));
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::InvalidArgument(format!(
            "box {bbox:?} lies outside the {width}×{height} image"
        )));
    }
    Ok((x0, y0, x1, y1))
}

/// Extracts the crop a style selects from `image`, with `bbox` given in that
/// image's pixel coordinates.
pub fn crop_region(image: &Tensor, bbox: BoundingBox, style: &CropStyle) -> Result<Crop> {
    let (h, w, c) = require_hwc(image, "crop")?;
    let (x0, y0, x1, y1) = crop_bounds(bbox, style, w, h)?;
    let (cw, ch) = (x1 - x0, y1 - y0);
    if style.kind == CropKind::ExtMulti && (cw < style.min_size || ch < style.min_size) {
        return Ok(Crop::Rejected { width: cw, height: ch });
    }
    Ok(Crop::Accepted(remap(image, ch, cw, c, |y, x| (y + y0, x + x0))))
}

/// Which geometric transforms a head draws from each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub flip_h: bool,
    pub flip_v: bool,
    pub zoom_range: [f64; 2],
    pub shift_frac: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::identity()
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            flip_h: false,
            flip_v: false,
            zoom_range: [1.0, 1.0],
            shift_frac: 0.0,
        }
    }

    pub fn flips() -> Self {
        AugmentPolicy {
            flip_h: true,
            flip_v: true,
            ..Self::identity()
        }
    }

    pub fn zoom() -> Self {
        AugmentPolicy {
            zoom_range: [0.8, 1.25],
            ..Self::identity()
        }
    }

    pub fn shift() -> Self {
        AugmentPolicy {
            shift_frac: 0.1,
            ..Self::identity()
        }
    }

    /// `none`, `flip`, `zoom` or `shift`.
    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::identity()),
            "flip" => Ok(Self::flips()),
            "zoom" => Ok(Self::zoom()),
            "shift" => Ok(Self::shift()),
            other => Err(Error::Config(format!("unknown augmentation preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_zoom_range(self.zoom_range)?;
        check_shift_frac(self.shift_frac)
    }
}

/// One sample's transform parameters for one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub zoom: f64,
    /// Shift as fractions of ±1 of the policy's maximum, (x, y).
    pub shift: (f64, f64),
}

/// Draws a fixed number of values regardless of the policy so the stream
/// layout never depends on which transforms are enabled.
pub fn draw_transform(policy: &AugmentPolicy, seed: u64, epoch: u64, sample_id: &str) -> TransformDraw {
    let mut rng = seed::rng(&[seed, epoch, seed::hash_str(sample_id)]);
    let flip_h = rng.random_bool(0.5);
    let flip_v = rng.random_bool(0.5);
    let zoom = draw_zoom(&mut rng, policy.zoom_range);
    let shift = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
    TransformDraw {
        flip_h: policy.flip_h && flip_h,
        flip_v: policy.flip_v && flip_v,
        zoom: if policy.zoom_range == [1.0, 1.0] { 1.0 } else { zoom },
        shift: if policy.shift_frac == 0.0 { (0.0, 0.0) } else { shift },
    }
}

pub fn apply_transform(t: &Tensor, draw: &TransformDraw, shift_frac: f64) -> Result<Tensor> {
    let (h, w, _) = require_hwc(t, "augment")?;
    let mut out = t.clone();
    if draw.flip_h {
        out = flip(&out, Axis::Horizontal)?;
    }
    if draw.flip_v {
        out = flip(&out, Axis::Vertical)?;
    }
    out = zoom(&out, draw.zoom)?;
    let (dx, dy) = (
        shift_pixels(draw.shift.0, shift_frac, w),
        shift_pixels(draw.shift.1, shift_frac, h),
    );
    if (dx, dy) != (0, 0) {
        out = shift(&out, dx, dy)?;
    }
    Ok(out)
}

/// Applies this epoch's draw to the sample's crop, then resizes it to
/// `side × side`. Label, ids and metadata are carried over untouched.
pub fn augment_sample(
    sample: &RegionSample,
    policy: &AugmentPolicy,
    epoch: u64,
    seed: u64,
    side: usize,
) -> Result<RegionSample> {
    policy.validate()?;
    let draw = draw_transform(policy, seed, epoch, &sample.sample_id());
    let pixels = apply_transform(&sample.pixels, &draw, policy.shift_frac)?;
    Ok(RegionSample {
        pixels: resize_bilinear(&pixels, side, side)?,
        ..sample.clone()
    })
}
