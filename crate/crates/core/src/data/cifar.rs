use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::augment::Modality;
use crate::error::{Error, Result};

const RECORD: usize = 1 + 3 * 32 * 32;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

fn parse_records(bytes: &[u8], what: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::input(format!(
            "{} is not a whole number of CIFAR-10 records",
            what.display()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / RECORD * (RECORD - 1));
    let mut labels = Vec::with_capacity(bytes.len() / RECORD);
    for rec in bytes.chunks_exact(RECORD) {
        if rec[0] >= 10 {
            return Err(Error::input(format!("label {} in {}", rec[0], what.display())));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

fn load_files(dir: &Path, files: &[&str]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (p, l) = parse_records(&bytes, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let inputs = Array2::from_shape_vec((labels.len(), RECORD - 1), pixels).expect("record size");
    Dataset::new(
        inputs,
        labels,
        10,
        Modality::Image {
            channels: 3,
            height: 32,
            width: 32,
        },
    )
}

/// Reads the binary CIFAR-10 release (`data_batch_{1..5}.bin`,
/// `test_batch.bin`) with pixels scaled to `[0, 1]`, channel-major.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_files(dir, &TRAIN_FILES)?, load_files(dir, &["test_batch.bin"])?))
}
