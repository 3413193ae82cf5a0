use std::f64::consts::PI;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{make_split, Benchmark, Dataset, SplitSpec};
use crate::augment::Modality;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const TOY_DIM: usize = 16;
pub const TOY_SPREAD: f64 = 0.3;

/// Isotropic Gaussian clusters, one per class.
///
/// Centers sit on the scaled standard basis (a regular simplex with unit
/// edge) when `dim >= num_classes`, and on a unit ring in the first two
/// coordinates otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub labeled_per_class: usize,
    pub unlabeled: usize,
    pub dim: usize,
    /// Per-coordinate noise std.
    pub spread: f64,
    pub test_per_class: usize,
    pub seed: u64,
}

impl BlobsConfig {
    pub fn new(num_classes: usize, labeled_per_class: usize, unlabeled: usize, dim: usize, spread: f64, seed: u64) -> Self {
        Self {
            num_classes,
            labeled_per_class,
            unlabeled,
            dim,
            spread,
            test_per_class: 200,
            seed,
        }
    }

    /// The default synthetic benchmark: 8 classes, 4 labels per class,
    /// 4000 unlabeled points.
    pub fn toy(seed: u64) -> Self {
        Self::new(8, 4, 4000, TOY_DIM, TOY_SPREAD, seed)
    }

    pub fn centers(&self) -> Array2<f64> {
        let (l, d) = (self.num_classes, self.dim);
        if d >= l {
            let scale = std::f64::consts::FRAC_1_SQRT_2;
            Array2::from_shape_fn((l, d), |(c, j)| if c == j { scale } else { 0.0 })
        } else {
            Array2::from_shape_fn((l, d), |(c, j)| {
                let angle = 2.0 * PI * c as f64 / l as f64;
                match j {
                    0 => angle.cos(),
                    1 => angle.sin(),
                    _ => 0.0,
                }
            })
        }
    }
}

fn sample_points(
    config: &BlobsConfig,
    centers: &Array2<f64>,
    labels: &[usize],
    stream_index: u64,
) -> Array2<f64> {
    let mut rng = stream_rng(config.seed, Stream::Blobs, stream_index, 0);
    let normal = Normal::new(0.0, config.spread.max(0.0)).expect("finite spread");
    let mut x = Array2::zeros((labels.len(), config.dim));
    for (mut row, &c) in x.outer_iter_mut().zip(labels) {
        for (v, &m) in row.iter_mut().zip(centers.row(c)) {
            *v = m + if config.spread > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        }
    }
    x
}

/// Generates the training pool (`labeled_per_class * L + unlabeled` points,
/// balanced), a test set of `test_per_class * L` points, and a stratified
/// labeled split of the pool.
pub fn make_blobs(config: &BlobsConfig) -> Result<Benchmark> {
    if config.num_classes < 2 {
        return Err(Error::config("blobs need at least 2 classes"));
    }
    if config.dim < 2 {
        return Err(Error::config("blobs need at least 2 dimensions"));
    }
    if !(config.spread >= 0.0) {
        return Err(Error::config("spread must be nonnegative"));
    }
    let l = config.num_classes;
    let centers = config.centers();
    let modality = Modality::Vector { dim: config.dim };

    let pool = config.labeled_per_class * l + config.unlabeled;
    let train_labels: Vec<usize> = (0..pool).map(|i| i % l).collect();
    let train = Dataset::new(sample_points(config, &centers, &train_labels, 0), train_labels, l, modality)?;

    let test_labels: Vec<usize> = (0..config.test_per_class * l).map(|i| i % l).collect();
    let test = Dataset::new(sample_points(config, &centers, &test_labels, 1), test_labels, l, modality)?;

    let name = format!("blobs-l{l}-d{}-s{}", config.dim, config.spread);
    let split = make_split(
        &train,
        &SplitSpec {
            n_per_class: config.labeled_per_class,
            seed: config.seed,
            dataset_id: name.clone(),
        },
    )?;
    Ok(Benchmark {
        name,
        train,
        test,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_centroid_accuracy(bench: &Benchmark) -> f64 {
        let l = bench.train.num_classes;
        let d = bench.train.inputs.ncols();
        let mut centroids = Array2::<f64>::zeros((l, d));
        let mut counts = vec![0.0; l];
        for e in &bench.split.labeled {
            let mut row = centroids.row_mut(e.class);
            row += &bench.train.inputs.row(e.index);
            counts[e.class] += 1.0;
        }
        for (mut row, n) in centroids.outer_iter_mut().zip(counts) {
            row /= n;
        }
        let correct = bench
            .test
            .inputs
            .outer_iter()
            .zip(&bench.test.labels)
            .filter(|(x, &y)| {
                let best = (0..l)
                    .min_by(|&a, &b| {
                        let da = (&centroids.row(a) - x).mapv(|v| v * v).sum();
                        let db = (&centroids.row(b) - x).mapv(|v| v * v).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == y
            })
            .count();
        correct as f64 / bench.test.len() as f64
    }

    #[test]
    fn labeled_count_and_test_size() {
        let bench = make_blobs(&BlobsConfig::new(8, 4, 100, 16, 0.3, 0)).unwrap();
        assert_eq!(bench.split.num_labeled(), 32);
        assert_eq!(bench.test.len(), 1600);
        assert_eq!(bench.train.len(), 132);
        let counts = bench.train.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn zero_spread_is_perfectly_separable() {
        for dim in [2, 16] {
            let bench = make_blobs(&BlobsConfig::new(8, 4, 40, dim, 0.0, 3)).unwrap();
            assert_eq!(nearest_centroid_accuracy(&bench), 1.0);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = BlobsConfig::new(4, 2, 20, 3, 0.5, 9);
        assert_eq!(make_blobs(&cfg).unwrap(), make_blobs(&cfg).unwrap());
        let other = BlobsConfig { seed: 10, ..cfg };
        assert_ne!(make_blobs(&other).unwrap().train, make_blobs(&cfg).unwrap().train);
    }

    #[test]
    fn rejects_single_class() {
        assert!(make_blobs(&BlobsConfig::new(1, 2, 20, 3, 0.5, 9)).is_err());
    }
}
