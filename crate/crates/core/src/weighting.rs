//! Class weights for the training loss.
//!
//! Four schemes: unweighted, the challenge's per-class weight table, the
//! balanced frequency heuristic `w_i = N / (m · n_i)`, and that heuristic
//! multiplied by a hand-tuned per-class multiplier table. Classes with no
//! training samples get the largest weight among the classes that have some.
//!
//! Training weights are strictly positive; the false-detection class trains
//! with weight 1 but scores with weight 0, so the challenge table exposes
//! two views.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ClassWeights;

#[derive(Clone, Debug, PartialEq)]
pub enum WeightScheme {
    Unweighted,
    FmowWeights(FmowWeightTable),
    FrequencyBalanced,
    FrequencyManual(Vec<f64>),
}

/// Scheme names as they appear in run configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    Unweighted,
    Fmow,
    /// The balanced heuristic as computed.
    Frequency,
    /// The balanced heuristic after the manual multipliers.
    FrequencyManual,
}

/// Reads a `label_index,value` CSV covering labels `0..m` exactly once.
pub fn load_value_table(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| table_error(path, e))?;
    let headers = reader.headers().map_err(|e| table_error(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "label_index" {
        return Err(Error::Data(format!(
            "{}: expected header label_index,<value>",
            path.display()
        )));
    }
    let mut values = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| table_error(path, e))?;
        let bad = || {
            Error::Data(format!(
                "{}: row {}: {:?}",
                path.display(),
                i + 1,
                rec.iter().collect::<Vec<_>>()
            ))
        };
        let label: usize = rec[0].trim().parse().map_err(|_| bad())?;
        let value: f64 = rec[1].trim().parse().map_err(|_| bad())?;
        if !value.is_finite() || value < 0.0 {
            return Err(bad());
        }
        if values.insert(label, value).is_some() {
            return Err(Error::Data(format!("{}: label {label} listed twice", path.display())));
        }
    }
    let m = values.keys().next_back().map_or(0, |k| k + 1);
    let missing: Vec<usize> = (0..m).filter(|i| !values.contains_key(i)).collect();
    if m == 0 || !missing.is_empty() {
        return Err(Error::Data(format!("{}: missing classes {missing:?}", path.display())));
    }
    Ok(values.into_values().collect())
}

fn table_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn write_value_table(path: &Path, column: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label_index", column])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::fsutil::write_atomic(path, &bytes)
}

/// Per-class challenge weights, as published (typically 0.6, 1.0 or 1.4).
#[derive(Clone, Debug, PartialEq)]
pub struct FmowWeightTable {
    weights: Vec<f64>,
}

impl FmowWeightTable {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "weight table needs finite nonnegative entries".into(),
            ));
        }
        Ok(FmowWeightTable { weights })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(load_value_table(path)?)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    /// Loss weights: the false-detection entry is 1.
    pub fn training_view(&self, false_detection_index: usize) -> Result<Vec<f64>> {
        self.check_index(false_detection_index)?;
        let mut w = self.weights.clone();
        w[false_detection_index] = 1.0;
        if w.iter().any(|x| *x <= 0.0) {
            return Err(Error::Config("challenge weights must be positive for training".into()));
        }
        Ok(w)
    }

    /// Scoring weights: the false-detection entry is 0.
    pub fn metrics_view(&self, false_detection_index: usize) -> Result<ClassWeights> {
        self.check_index(false_detection_index)?;
        let mut w = self.weights.clone();
        w[false_detection_index] = 0.0;
        ClassWeights::new(w, false_detection_index)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < self.weights.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "false detection index {i} outside {} classes",
                self.weights.len()
            )))
        }
    }
}

/// `w_i = N / (m · n_i)`; empty classes take the largest present weight.
pub fn balanced_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::Data("frequency weighting needs a nonempty training set".into()));
    }
    let m = counts.len() as f64;
    let raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| n as f64 / (m * c as f64)))
        .collect();
    let max = raw.iter().flatten().copied().fold(f64::MIN, f64::max);
    Ok(raw.into_iter().map(|w| w.unwrap_or(max)).collect())
}

/// Per-class loss weights for `class_counts` (one entry per class, the
/// false-detection class included).
pub fn training_weights(
    scheme: &WeightScheme,
    class_counts: &[usize],
    false_detection_index: usize,
) -> Result<Vec<f64>> {
    let m = class_counts.len();
    let check_len = |len: usize, what: &str| {
        if len == m {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} has {len} entries for {m} classes")))
        }
    };
    let w = match scheme {
        WeightScheme::Unweighted => vec![1.0; m],
        WeightScheme::FmowWeights(table) => {
            check_len(table.len(), "challenge weight table")?;
            table.training_view(false_detection_index)?
        }
        WeightScheme::FrequencyBalanced => balanced_weights(class_counts)?,
        WeightScheme::FrequencyManual(multipliers) => {
            check_len(multipliers.len(), "multiplier table")?;
            if multipliers.iter().any(|x| !x.is_finite() || *x <= 0.0) {
                return Err(Error::Config("weight multipliers must be positive".into()));
            }
            balanced_weights(class_counts)?
                .into_iter()
                .zip(multipliers)
                .map(|(w, k)| w * k)
                .collect()
        }
    };
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_oracle() {
        let w = balanced_weights(&[10, 30, 60]).unwrap();
        let expect = [10.0 / 3.0, 10.0 / 9.0, 5.0 / 9.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(balanced_weights(&[7, 7, 7, 7]).unwrap(), vec![1.0; 4]);
        assert!(balanced_weights(&[0, 0]).is_err());
    }

    #[test]
    fn empty_class_gets_max_weight() {
        let w = balanced_weights(&[10, 30, 0]).unwrap();
        assert_eq!(w[2], w[0]);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn schemes() {
        let counts = [10, 30, 0];
        assert_eq!(
            training_weights(&WeightScheme::Unweighted, &counts, 2).unwrap(),
            vec![1.0; 3]
        );
        let table = FmowWeightTable::new(vec![0.6, 1.4, 0.0]).unwrap();
        assert_eq!(
            training_weights(&WeightScheme::FmowWeights(table.clone()), &counts, 2).unwrap(),
            vec![0.6, 1.4, 1.0]
        );
        assert_eq!(table.metrics_view(2).unwrap().as_slice(), &[0.6, 1.4, 0.0]);
        let manual = training_weights(&WeightScheme::FrequencyManual(vec![2.0, 1.0, 0.5]), &counts, 2).unwrap();
        let base = balanced_weights(&counts).unwrap();
        assert_eq!(manual, vec![base[0] * 2.0, base[1], base[2] * 0.5]);
        assert!(training_weights(&WeightScheme::FrequencyManual(vec![1.0]), &counts, 2).is_err());
    }

    #[test]
    fn table_round_trip_and_missing_class() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        write_value_table(&path, "weight", &[0.6, 1.0, 1.4, 0.0]).unwrap();
        assert_eq!(FmowWeightTable::load(&path).unwrap().as_slice(), &[0.6, 1.0, 1.4, 0.0]);
        std::fs::write(&path, "label_index,weight\n0,1.0\n2,1.0\n").unwrap();
        assert!(FmowWeightTable::load(&path).is_err());
        std::fs::write(&path, "label_index,weight\n0,1.0\n0,1.0\n").unwrap();
        assert!(FmowWeightTable::load(&path).is_err());
    }
}
