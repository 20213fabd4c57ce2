//! Challenge scoring: confusion matrix, per-class precision/recall/F, and the
//! weighted F-measure F̄ = Σ F_i·w_i / Σ w_i.
//!
//! Degenerate classes: when tp+fp = 0, tp+fn = 0 or P+R = 0 the affected
//! quantity is 0, and the class still counts in the weight denominator. A
//! class absent from both predictions and truth therefore scores F = 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// m×m counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    m: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(m: usize) -> Self {
        ConfusionMatrix {
            m,
            counts: vec![0; m * m],
        }
    }

    pub fn classes(&self) -> usize {
        self.m
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.m + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.m..(truth + 1) * self.m].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.m).map(|g| self.get(g, pred)).sum()
    }

    fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.m + pred] += 1;
    }
}

pub fn build_confusion(pred: &[usize], truth: &[usize], m: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionMatrix::new(m);
    for (index, (&p, &g)) in pred.iter().zip(truth).enumerate() {
        for label in [g, p] {
            if label >= m {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    classes: m,
                });
            }
        }
        c.record(g, p);
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub label: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_report(c: &ConfusionMatrix, i: usize) -> ClassReport {
    let tp = c.get(i, i);
    let fp = c.col_sum(i) - tp;
    let fn_ = c.row_sum(i) - tp;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassReport {
        label: i,
        tp,
        fp,
        fn_,
        precision,
        recall,
        f,
    }
}

/// (P_i, R_i, F_i) for class `i`.
pub fn class_prf(c: &ConfusionMatrix, i: usize) -> (f64, f64, f64) {
    let r = class_report(c, i);
    (r.precision, r.recall, r.f)
}

/// Scoring weights: nonnegative, zero on the false-detection class, and
/// positive somewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
    false_detection_index: usize,
}

impl ClassWeights {
    pub fn new(w: Vec<f64>, false_detection_index: usize) -> Result<Self> {
        if false_detection_index >= w.len() {
            return Err(Error::InvalidArgument(format!(
                "false detection index {false_detection_index} outside {} classes",
                w.len()
            )));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArgument(
                "class weights must be finite and nonnegative".into(),
            ));
        }
        if w[false_detection_index] != 0.0 {
            return Err(Error::InvalidArgument("false detection weight must be 0".into()));
        }
        if !w.iter().any(|x| *x > 0.0) {
            return Err(Error::InvalidArgument("all class weights are zero".into()));
        }
        Ok(ClassWeights {
            w,
            false_detection_index,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn false_detection_index(&self) -> usize {
        self.false_detection_index
    }
}

/// F̄ = Σ F_i·w_i / Σ w_i.
pub fn weighted_fmeasure(c: &ConfusionMatrix, weights: &ClassWeights) -> Result<f64> {
    if weights.w.len() != c.classes() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} classes",
            weights.w.len(),
            c.classes()
        )));
    }
    let total: f64 = weights.w.iter().sum();
    if total == 0.0 {
        return Err(Error::InvalidArgument("class weights sum to zero".into()));
    }
    let num: f64 = (0..c.classes()).map(|i| class_prf(c, i).2 * weights.w[i]).sum();
    Ok(num / total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub fmeasure: f64,
    pub regions: u64,
    pub false_detection_index: usize,
    pub weights: Vec<f64>,
    pub classes: Vec<ClassReport>,
}

impl ScoreReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>7} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9}",
            "class", "weight", "tp", "fp", "fn", "precision", "recall", "f"
        );
        for c in &self.classes {
            let marker = if c.label == self.false_detection_index {
                "*"
            } else {
                " "
            };
            let _ = writeln!(
                out,
                "{:>4}{marker} {:>7.3} {:>5} {:>5} {:>5} {:>9.4} {:>9.4} {:>9.4}",
                c.label, self.weights[c.label], c.tp, c.fp, c.fn_, c.precision, c.recall, c.f
            );
        }
        let _ = writeln!(out, "regions: {}", self.regions);
        let _ = writeln!(out, "weighted F-measure: {:.6}", self.fmeasure);
        out
    }
}

/// Scores per-region labels matched by region id. Every truth region must
/// appear exactly once among the predictions, and no others.
pub fn score_labels(
    pred: &[(String, usize)],
    truth: &[(String, usize)],
    weights: &ClassWeights,
) -> Result<ScoreReport> {
    let truth_map = unique_map(truth)?;
    let pred_map = unique_map(pred)?;
    let missing: Vec<String> = truth_map
        .keys()
        .filter(|k| !pred_map.contains_key(*k))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRegions(missing));
    }
    let extra: Vec<&String> = pred_map.keys().filter(|k| !truth_map.contains_key(*k)).collect();
    if !extra.is_empty() {
        return Err(Error::Data(format!("predictions for unknown regions: {extra:?}")));
    }
    let m = weights.as_slice().len();
    let (p, g): (Vec<usize>, Vec<usize>) = truth_map.iter().map(|(id, &g)| (pred_map[id], g)).unzip();
    let c = build_confusion(&p, &g, m)?;
    Ok(ScoreReport {
        fmeasure: weighted_fmeasure(&c, weights)?,
        regions: c.total(),
        false_detection_index: weights.false_detection_index(),
        weights: weights.as_slice().to_vec(),
        classes: (0..m).map(|i| class_report(&c, i)).collect(),
    })
}

fn unique_map(rows: &[(String, usize)]) -> Result<BTreeMap<String, usize>> {
    let mut map = BTreeMap::new();
    let mut dups = BTreeSet::new();
    for (id, label) in rows {
        if map.insert(id.clone(), *label).is_some() {
            dups.insert(id.clone());
        }
    }
    if dups.is_empty() {
        Ok(map)
    } else {
        Err(Error::DuplicateRegions(dups.into_iter().collect()))
    }
}

/// Reads a `region_id,label` CSV.
pub fn read_label_csv(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "region_id" || &headers[1] != "label" {
        return Err(Error::Data(format!(
            "{}: expected header region_id,label",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let label = rec[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("{}: row {}: bad label {:?}", path.display(), i + 1, &rec[1])))?;
        rows.push((rec[0].to_string(), label));
    }
    Ok(rows)
}

pub fn write_label_csv(path: &Path, rows: &[(String, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["region_id", "label"])?;
    for (id, label) in rows {
        w.write_record([id.as_str(), &label.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::fsutil::write_atomic(path, &bytes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Scores a prediction file against a truth file. The weights file lists
/// every class once; `false_detection_index` defaults to the last class and
/// its weight is forced to 0.
pub fn score_submission(
    pred_file: &Path,
    truth_file: &Path,
    weights_file: &Path,
    false_detection_index: Option<usize>,
) -> Result<ScoreReport> {
    let table = crate::weighting::FmowWeightTable::load(weights_file)?;
    let fd = false_detection_index.unwrap_or(table.len() - 1);
    let weights = table.metrics_view(fd)?;
    let pred = read_label_csv(pred_file)?;
    let truth = read_label_csv(truth_file)?;
    score_labels(&pred, &truth, &weights)
}
