//! Region manifests, metadata vectors and region grouping.
//!
//! A manifest is a JSON file (`schema: 1`):
//!
//! ```json
//! {
//!   "schema": 1,
//!   "classes": ["airport", "...", "false_detection"],
//!   "split": "train",
//!   "records": [{
//!     "region_id": "train-0003",
//!     "image_id": "train-0003-1",
//!     "path": "images/train/train-0003-1.png",
//!     "multi_path": "images/train/train-0003-1.tns",
//!     "box": {"x": 12, "y": 9, "w": 14, "h": 11},
//!     "label": 4,
//!     "metadata": {"gsd": 0.61, "sun_elevation": null, "month": 7, ...}
//!   }]
//! }
//! ```
//!
//! The last class is the false-detection class. Paths are relative to the
//! manifest's directory. A `null` metadata field is missing and is replaced
//! by the train-split mean, i.e. contributes 0 after mean subtraction.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA: u32 = 1;

/// Metadata vector layout, in order.
pub const METADATA_FIELDS: [&str; 8] = [
    "gsd",
    "sun_elevation",
    "month",
    "day_of_week",
    "box_w",
    "box_h",
    "image_w",
    "image_h",
];

pub const METADATA_WIDTH: usize = METADATA_FIELDS.len();

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataRecord {
    pub gsd: Option<f64>,
    pub sun_elevation: Option<f64>,
    pub month: Option<f64>,
    pub day_of_week: Option<f64>,
    pub box_w: Option<f64>,
    pub box_h: Option<f64>,
    pub image_w: Option<f64>,
    pub image_h: Option<f64>,
}

impl MetadataRecord {
    pub fn values(&self) -> [Option<f64>; METADATA_WIDTH] {
        [
            self.gsd,
            self.sun_elevation,
            self.month,
            self.day_of_week,
            self.box_w,
            self.box_h,
            self.image_w,
            self.image_h,
        ]
    }
}

/// Per-field means over the present values; fields never present average 0.
pub fn metadata_means<'a>(records: impl IntoIterator<Item = &'a MetadataRecord>) -> Vec<f64> {
    let mut sum = [0.0; METADATA_WIDTH];
    let mut count = [0usize; METADATA_WIDTH];
    for rec in records {
        for (i, v) in rec.values().iter().enumerate() {
            if let Some(v) = v {
                sum[i] += v;
                count[i] += 1;
            }
        }
    }
    (0..METADATA_WIDTH)
        .map(|i| if count[i] == 0 { 0.0 } else { sum[i] / count[i] as f64 })
        .collect()
}

/// Mean-subtracted metadata; missing fields come out as 0.
pub fn metadata_vector(rec: &MetadataRecord, train_means: &[f64]) -> Result<Tensor> {
    if train_means.len() != METADATA_WIDTH {
        return Err(Error::InvalidArgument(format!(
            "{} metadata means for {METADATA_WIDTH} fields",
            train_means.len()
        )));
    }
    let v = rec
        .values()
        .iter()
        .zip(train_means)
        .map(|(v, m)| v.map_or(0.0, |v| v - m))
        .collect();
    Ok(Tensor::vector(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub region_id: String,
    pub image_id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_path: Option<PathBuf>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: usize,
    #[serde(default)]
    pub metadata: MetadataRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub classes: Vec<String>,
    pub split: Split,
    pub records: Vec<Record>,
    /// Directory the record paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

/// One annotated box in one image, with its crop and metadata vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSample {
    pub region_id: String,
    pub image_id: String,
    pub pixels: Tensor,
    pub bbox: BoundingBox,
    pub label: usize,
    pub metadata: Vec<f64>,
}

impl RegionSample {
    /// Key for per-sample random streams.
    pub fn sample_id(&self) -> String {
        format!("{}/{}", self.region_id, self.image_id)
    }
}

impl Manifest {
    pub fn new(classes: Vec<String>, split: Split) -> Self {
        Manifest {
            schema: SCHEMA,
            classes,
            split,
            records: Vec::new(),
            root: PathBuf::new(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn false_detection_index(&self) -> usize {
        self.classes.len() - 1
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.root.join(path)
    }

    /// Structural checks; image existence is checked by `load_manifest`.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::Data(format!("unsupported manifest schema {}", self.schema)));
        }
        if self.classes.len() < 2 {
            return Err(Error::Data(
                "manifest needs at least one class plus false detection".into(),
            ));
        }
        let m = self.classes.len();
        let fd = self.false_detection_index();
        let mut labels: BTreeMap<&str, usize> = BTreeMap::new();
        let mut pairs = HashSet::new();
        for (index, r) in self.records.iter().enumerate() {
            if r.label >= m {
                return Err(Error::LabelOutOfRange {
                    index,
                    label: r.label,
                    classes: m,
                });
            }
            if self.split == Split::Train && r.label == fd {
                return Err(Error::Data(format!(
                    "train region {} is labelled false detection",
                    r.region_id
                )));
            }
            if r.bbox.w == 0 || r.bbox.h == 0 {
                return Err(Error::Data(format!(
                    "region {} image {} has an empty box",
                    r.region_id, r.image_id
                )));
            }
            if let Some(&prev) = labels.get(r.region_id.as_str()) {
                if prev != r.label {
                    return Err(Error::Data(format!(
                        "region {} has conflicting labels {prev} and {}",
                        r.region_id, r.label
                    )));
                }
            }
            labels.insert(&r.region_id, r.label);
            if !pairs.insert((&r.region_id, &r.image_id)) {
                return Err(Error::Data(format!(
                    "region {} image {} listed twice",
                    r.region_id, r.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_json(path, self)
    }

    /// Region id → its image ids, both ascending.
    pub fn group_by_region(&self) -> BTreeMap<String, Vec<String>> {
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.region_id.clone()).or_default().push(r.image_id.clone());
        }
        for images in map.values_mut() {
            images.sort();
        }
        map
    }

    /// One `(region_id, label)` per distinct region, ascending by id.
    pub fn region_labels(&self) -> Vec<(String, usize)> {
        let map: BTreeMap<&str, usize> = self.records.iter().map(|r| (r.region_id.as_str(), r.label)).collect();
        map.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Training samples per class (records, not regions).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn metadata_means(&self) -> Vec<f64> {
        metadata_means(self.records.iter().map(|r| &r.metadata))
    }
}

/// Parses and validates a manifest and checks that every image exists.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = crate::fsutil::read_to_string(path)?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    for r in &manifest.records {
        for p in std::iter::once(&r.path).chain(r.multi_path.as_ref()) {
            let full = manifest.resolve(p);
            if !full.is_file() {
                return Err(Error::Data(format!("image {} not found", full.display())));
            }
        }
    }
    Ok(manifest)
}

/// Region ids shared by two manifests; empty for hygienic splits.
pub fn shared_regions(a: &Manifest, b: &Manifest) -> Vec<String> {
    let ids: BTreeSet<&str> = a.records.iter().map(|r| r.region_id.as_str()).collect();
    let shared: BTreeSet<&str> = b
        .records
        .iter()
        .map(|r| r.region_id.as_str())
        .filter(|id| ids.contains(id))
        .collect();
    shared.into_iter().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(region: &str, image: &str, label: usize) -> Record {
        Record {
            region_id: region.into(),
            image_id: image.into(),
            path: PathBuf::from(format!("{image}.png")),
            multi_path: None,
            bbox: BoundingBox { x: 1, y: 1, w: 4, h: 4 },
            label,
            metadata: MetadataRecord::default(),
        }
    }

    fn manifest(split: Split, records: Vec<Record>) -> Manifest {
        Manifest {
            records,
            ..Manifest::new(vec!["a".into(), "b".into(), "fd".into()], split)
        }
    }

    #[test]
    fn validation_rules() {
        manifest(Split::Train, vec![]).validate().unwrap();
        assert!(manifest(Split::Train, vec![record("r", "i", 2)]).validate().is_err());
        manifest(Split::Eval, vec![record("r", "i", 2)]).validate().unwrap();
        let conflict = manifest(Split::Eval, vec![record("r7", "i1", 0), record("r7", "i2", 1)]);
        let msg = conflict.validate().unwrap_err().to_string();
        assert!(msg.contains("r7"), "{msg}");
        assert!(manifest(Split::Eval, vec![record("r", "i", 0), record("r", "i", 0)])
            .validate()
            .is_err());
        assert!(manifest(Split::Eval, vec![record("r", "i", 3)]).validate().is_err());
    }

    #[test]
    fn grouping_is_sorted() {
        let m = manifest(
            Split::Eval,
            vec![
                record("b", "b2", 0),
                record("a", "a1", 1),
                record("b", "b1", 0),
                record("b", "b0", 0),
            ],
        );
        let g = m.group_by_region();
        assert_eq!(g.keys().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(g["b"], vec!["b0", "b1", "b2"]);
        assert_eq!(m.region_labels(), vec![("a".to_string(), 1), ("b".to_string(), 0)]);
    }

    #[test]
    fn metadata_mean_subtraction() {
        let rec = MetadataRecord {
            gsd: Some(2.0),
            month: Some(6.0),
            ..MetadataRecord::default()
        };
        let other = MetadataRecord {
            gsd: Some(4.0),
            month: Some(6.0),
            box_w: Some(10.0),
            ..MetadataRecord::default()
        };
        let means = metadata_means([&rec, &other]);
        assert_eq!(&means[..5], &[3.0, 0.0, 6.0, 0.0, 10.0]);
        let v = metadata_vector(&rec, &means).unwrap();
        assert_eq!(v.data(), &[-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let raw = metadata_vector(&other, &[0.0; 8]).unwrap();
        assert_eq!(raw.data()[4], 10.0);
        assert!(metadata_vector(&rec, &[0.0; 3]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest(Split::Eval, vec![record("r", "i", 1)]);
        m.records[0].metadata.gsd = Some(0.5);
        std::fs::write(dir.path().join("i.png"), b"").unwrap();
        let path = dir.path().join("eval.json");
        m.save(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.classes, m.classes);
        assert_eq!(back.root, dir.path());
        std::fs::remove_file(dir.path().join("i.png")).unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
