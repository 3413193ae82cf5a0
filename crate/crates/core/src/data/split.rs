use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// How many labeled samples to draw per class, and from which seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_per_class: usize,
    pub seed: u64,
    pub dataset_id: String,
}

/// A labeled sample; its position in [`Split::labeled`] is its buffer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub index: usize,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub dataset_id: String,
    /// Buffer order.
    pub labeled: Vec<LabeledEntry>,
    /// Dataset indices of the unlabeled pool, which includes the labeled
    /// samples.
    pub unlabeled: Vec<usize>,
}

/// Stratified sampling without replacement; labeled samples are ordered by
/// class, then by draw order, and that order defines their buffer indices.
pub fn make_split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    if spec.n_per_class == 0 {
        return Err(Error::config("need at least one labeled sample per class"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &c) in dataset.labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut labeled = Vec::with_capacity(spec.n_per_class * dataset.num_classes);
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < spec.n_per_class {
            return Err(Error::config(format!(
                "class {class} has {} samples, {} requested",
                members.len(),
                spec.n_per_class
            )));
        }
        let mut rng = stream_rng(spec.seed, Stream::Split, class as u64, 0);
        members.shuffle(&mut rng);
        labeled.extend(
            members[..spec.n_per_class]
                .iter()
                .map(|&index| LabeledEntry { index, class }),
        );
    }
    Ok(Split {
        dataset_id: spec.dataset_id.clone(),
        labeled,
        unlabeled: (0..dataset.len()).collect(),
    })
}

impl Split {
    pub fn from_parts(dataset_id: &str, labeled: Vec<LabeledEntry>, unlabeled: Vec<usize>, dataset: &Dataset) -> Result<Self> {
        let split = Self {
            dataset_id: dataset_id.to_string(),
            labeled,
            unlabeled,
        };
        split.validate(dataset)?;
        Ok(split)
    }

    /// `K`.
    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        self.labeled.iter().map(|e| e.index).collect()
    }

    pub fn labeled_classes(&self) -> Vec<usize> {
        self.labeled.iter().map(|e| e.class).collect()
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        let mut seen = vec![false; dataset.len()];
        for e in &self.labeled {
            if e.index >= dataset.len() {
                return Err(Error::input(format!("labeled index {} out of range", e.index)));
            }
            if dataset.labels[e.index] != e.class {
                return Err(Error::input(format!(
                    "manifest class {} disagrees with dataset label {} at index {}",
                    e.class, dataset.labels[e.index], e.index
                )));
            }
            if std::mem::replace(&mut seen[e.index], true) {
                return Err(Error::input(format!("labeled index {} listed twice", e.index)));
            }
        }
        if self.unlabeled.iter().any(|&i| i >= dataset.len()) {
            return Err(Error::input("unlabeled index out of range"));
        }
        Ok(())
    }

    /// One `index,class` line per labeled sample, in buffer order.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for e in &self.labeled {
            writeln!(out, "{},{}", e.index, e.class).expect("write to string");
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_manifest(text: &str) -> Result<Vec<LabeledEntry>> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|line| {
                let (index, class) = line
                    .split_once(',')
                    .ok_or_else(|| Error::input(format!("manifest line `{line}` is not `index,class`")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::input(format!("manifest line `{line}`: {e}")))
                };
                Ok(LabeledEntry {
                    index: parse(index)?,
                    class: parse(class)?,
                })
            })
            .collect()
    }

    /// Loads a manifest written by [`Self::write_manifest`]; the unlabeled
    /// pool is the whole dataset.
    pub fn read_manifest(path: &Path, dataset_id: &str, dataset: &Dataset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_parts(
            dataset_id,
            Self::parse_manifest(&text)?,
            (0..dataset.len()).collect(),
            dataset,
        )
    }
}
