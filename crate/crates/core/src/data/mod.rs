//! Datasets, labeled/unlabeled splits and the batch sampler.

mod blobs;
mod cifar;
mod sampler;
mod split;

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::Modality;
use crate::error::{Error, Result};

pub use blobs::{make_blobs, BlobsConfig, TOY_DIM, TOY_SPREAD};
pub use cifar::load_cifar10;
pub use sampler::{sample_batches, BatchPair, BatchSampler, BatchStream};
pub use split::{make_split, LabeledEntry, Split, SplitSpec};

/// Inputs (one row per sample) with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub modality: Modality,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize, modality: Modality) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::input(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if inputs.ncols() != modality.input_len() {
            return Err(Error::input("input width does not match modality"));
        }
        if let Some(c) = labels.iter().find(|&&c| c >= num_classes) {
            return Err(Error::input(format!("label {c} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the given rows into a new matrix.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        self.inputs.select(Axis(0), indices)
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.labels {
            counts[c] += 1;
        }
        counts
    }
}

/// Training pool, held-out test set and the labeled split of the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SplitTag {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
struct ColumnarRow {
    split: SplitTag,
    label: usize,
    features: String,
}

impl Benchmark {
    /// Writes a vector benchmark as one CSV with columns
    /// `split,label,features` where features are space-separated. Labeled
    /// rows appear in buffer order; the unlabeled pool is every train row.
    pub fn write_columnar(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let is_labeled = {
            let mut v = vec![false; self.train.len()];
            for e in &self.split.labeled {
                v[e.index] = true;
            }
            v
        };
        let labeled_rows = self.split.labeled.iter().map(|e| (SplitTag::Labeled, e.index));
        let unlabeled_rows = (0..self.train.len())
            .filter(|&i| !is_labeled[i])
            .map(|i| (SplitTag::Unlabeled, i));
        for (tag, i) in labeled_rows.chain(unlabeled_rows) {
            writer.serialize(ColumnarRow {
                split: tag,
                label: self.train.labels[i],
                features: join(self.train.inputs.row(i).iter()),
            })?;
        }
        for (i, &label) in self.test.labels.iter().enumerate() {
            writer.serialize(ColumnarRow {
                split: SplitTag::Test,
                label,
                features: join(self.test.inputs.row(i).iter()),
            })?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_columnar(path: &Path, name: &str, num_classes: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut train_rows = Vec::new();
        let mut train_labels = Vec::new();
        let mut test_rows = Vec::new();
        let mut test_labels = Vec::new();
        let mut labeled = Vec::new();
        for row in reader.deserialize() {
            let row: ColumnarRow = row?;
            let features = row
                .features
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|e| Error::input(format!("bad feature `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            match row.split {
                SplitTag::Test => {
                    test_rows.push(features);
                    test_labels.push(row.label);
                }
                tag => {
                    if tag == SplitTag::Labeled {
                        labeled.push(LabeledEntry {
                            index: train_rows.len(),
                            class: row.label,
                        });
                    }
                    train_rows.push(features);
                    train_labels.push(row.label);
                }
            }
        }
        let dim = train_rows.first().map(Vec::len).unwrap_or(0);
        let to_matrix = |rows: Vec<Vec<f64>>| -> Result<Array2<f64>> {
            if rows.iter().any(|r| r.len() != dim) {
                return Err(Error::input("ragged feature rows"));
            }
            Array2::from_shape_vec((rows.len(), dim), rows.concat()).map_err(|e| Error::input(e.to_string()))
        };
        let modality = Modality::Vector { dim };
        let train = Dataset::new(to_matrix(train_rows)?, train_labels, num_classes, modality)?;
        let test = Dataset::new(to_matrix(test_rows)?, test_labels, num_classes, modality)?;
        let unlabeled = (0..train.len()).collect();
        Ok(Self {
            name: name.to_string(),
            split: Split::from_parts(name, labeled, unlabeled, &train)?,
            train,
            test,
        })
    }
}

fn join<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columnar_round_trip() {
        let bench = make_blobs(&BlobsConfig {
            num_classes: 3,
            labeled_per_class: 2,
            unlabeled: 12,
            dim: 4,
            spread: 0.3,
            test_per_class: 5,
            seed: 2,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        bench.write_columnar(&path).unwrap();
        let back = Benchmark::read_columnar(&path, &bench.name, 3).unwrap();
        assert_eq!(back.test, bench.test);
        assert_eq!(back.train.len(), bench.train.len());
        assert_eq!(back.split.labeled.len(), 6);
        for (a, b) in back.split.labeled.iter().zip(&bench.split.labeled) {
            assert_eq!(a.class, b.class);
            assert_eq!(back.train.inputs.row(a.index), bench.train.inputs.row(b.index));
        }
    }
}
