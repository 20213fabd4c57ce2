//! Per-region fusion of head outputs.
//!
//! For each head, the raw scores of every image showing a region are summed,
//! turned into probabilities with a softmax, and the most probable class
//! becomes that head's vote. A label wins only with a strict majority of the
//! head count; otherwise the region is declared a false detection.

use std::collections::{BTreeMap, HashMap};
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw, pre-softmax per-class scores from one classifier for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Self {
        ScoreVector(scores)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ScoreVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ScoreVector {
    fn from(v: Vec<f64>) -> Self {
        ScoreVector(v)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Elementwise sum of the score vectors of one region's images.
pub fn aggregate_region_scores(per_image: &[ScoreVector]) -> Result<ScoreVector> {
    let first = per_image
        .first()
        .ok_or_else(|| Error::InvalidArgument("region has no score vectors".into()))?;
    let mut sum = first.0.clone();
    for v in &per_image[1..] {
        if v.len() != sum.len() {
            return Err(Error::InvalidArgument(format!(
                "score vectors of length {} and {}",
                sum.len(),
                v.len()
            )));
        }
        for (s, x) in sum.iter_mut().zip(v.iter()) {
            *s += x;
        }
    }
    Ok(ScoreVector(sum))
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A head's label for a region: the most probable class after softmax.
pub fn head_decision(summed: &ScoreVector) -> usize {
    argmax(&softmax(summed))
}

/// One label per head for one region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionBallot {
    pub region_id: String,
    pub votes: Vec<usize>,
}

/// Strict-majority vote: the modal label if its count exceeds
/// `head_count / 2`, otherwise `false_detection_label`.
pub fn majority_vote(ballot: &RegionBallot, head_count: usize, false_detection_label: usize) -> Result<usize> {
    if ballot.votes.len() != head_count || head_count == 0 {
        return Err(Error::InvalidArgument(format!(
            "region {} has {} votes for {head_count} heads",
            ballot.region_id,
            ballot.votes.len()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in &ballot.votes {
        *counts.entry(v).or_default() += 1;
    }
    // BTreeMap iterates labels in ascending order, so the lowest label wins ties.
    let (label, votes) = counts
        .into_iter()
        .fold((0, 0), |best, (l, c)| if c > best.1 { (l, c) } else { best });
    Ok(if 2 * votes > head_count {
        label
    } else {
        false_detection_label
    })
}

/// One head's score for one image of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub region_id: String,
    pub image_id: String,
    pub scores: ScoreVector,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusedRegion {
    pub region_id: String,
    pub label: usize,
    /// Each head's vote.
    pub head_labels: Vec<usize>,
    /// Each head's softmax over its summed scores; the vote is its argmax.
    pub head_probabilities: Vec<Vec<f64>>,
}

/// Runs sum → softmax → argmax per head, then the strict-majority vote, for
/// every region of `regions` (region id → image ids). Image scores are summed
/// in ascending image-id order.
pub fn fuse_dataset(
    heads: &[Vec<ScoreRow>],
    regions: &BTreeMap<String, Vec<String>>,
    false_detection_label: usize,
) -> Result<Vec<FusedRegion>> {
    if heads.is_empty() {
        return Err(Error::InvalidArgument("no heads to fuse".into()));
    }
    let lookups: Vec<HashMap<(&str, &str), &ScoreVector>> = heads
        .iter()
        .enumerate()
        .map(|(h, rows)| {
            let mut map = HashMap::with_capacity(rows.len());
            for r in rows {
                if !regions.contains_key(&r.region_id) {
                    return Err(Error::Data(format!("head {h} scored unknown region {}", r.region_id)));
                }
                if map
                    .insert((r.region_id.as_str(), r.image_id.as_str()), &r.scores)
                    .is_some()
                {
                    return Err(Error::Data(format!(
                        "head {h} scored region {} image {} twice",
                        r.region_id, r.image_id
                    )));
                }
            }
            Ok(map)
        })
        .collect::<Result<_>>()?;

    let mut fused = Vec::with_capacity(regions.len());
    for (region, images) in regions {
        if images.is_empty() {
            return Err(Error::Data(format!("region {region} has no images")));
        }
        let mut images: Vec<&str> = images.iter().map(String::as_str).collect();
        images.sort_unstable();
        let mut head_labels = Vec::with_capacity(heads.len());
        let mut head_probabilities = Vec::with_capacity(heads.len());
        for (h, lookup) in lookups.iter().enumerate() {
            let vectors = images
                .iter()
                .map(|img| {
                    lookup
                        .get(&(region.as_str(), *img))
                        .map(|v| (*v).clone())
                        .ok_or_else(|| Error::Data(format!("head {h} has no score for region {region} image {img}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let summed = aggregate_region_scores(&vectors)?;
            let probs = softmax(&summed);
            head_labels.push(argmax(&probs));
            head_probabilities.push(probs);
        }
        let ballot = RegionBallot {
            region_id: region.clone(),
            votes: head_labels,
        };
        let label = majority_vote(&ballot, heads.len(), false_detection_label)?;
        fused.push(FusedRegion {
            region_id: region.clone(),
            label,
            head_labels: ballot.votes,
            head_probabilities,
        });
    }
    Ok(fused)
}

/// Writes a per-head score dump: `region_id,image_id,score_0..score_{m-1}`.
pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let classes = rows.first().map_or(0, |r| r.scores.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["region_id".to_string(), "image_id".to_string()];
    header.extend((0..classes).map(|i| format!("score_{i}")));
    w.write_record(&header)?;
    for r in rows {
        if r.scores.len() != classes {
            return Err(Error::InvalidArgument("score rows of differing length".into()));
        }
        let mut rec = vec![r.region_id.clone(), r.image_id.clone()];
        rec.extend(r.scores.iter().map(|s| s.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::fsutil::write_atomic(path, &bytes)
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "region_id" || &headers[1] != "image_id" {
        return Err(Error::Data(format!("{}: bad score header", path.display())));
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let scores = rec
            .iter()
            .skip(2)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("{}: row {}: bad score {s:?}", path.display(), line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(ScoreRow {
            region_id: rec[0].to_string(),
            image_id: rec[1].to_string(),
            scores: ScoreVector(scores),
        });
    }
    Ok(rows)
}
