use ndarray::ArrayView2;

use super::{InstanceCalibration, SemanticCalibration, TrainConfig};
use crate::error::{Error, Result};
use crate::memory::LabeledMemoryBuffer;
use crate::propagation::{
    aggregate, confidence_mask, distribution_align_batch, instance_similarity, scale_calibrate, scale_semantic,
    semantic_similarity, smooth_calibrate, smooth_instance, unfold, AlignmentState, InstanceDistribution,
    SemanticDistribution,
};

/// Targets derived from the weak (teacher) view of an unlabeled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelBundle {
    /// Class distributions after alignment, before calibration.
    pub p_weak: Vec<SemanticDistribution>,
    pub q_weak: Vec<InstanceDistribution>,
    pub p_hat: Vec<SemanticDistribution>,
    pub q_hat: Vec<InstanceDistribution>,
    pub mask: Vec<bool>,
    /// Samples whose calibration had nothing to renormalize and fell back to
    /// the uncalibrated distribution.
    pub degenerate: usize,
}

impl PseudoLabelBundle {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn retained_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn mean_max_confidence(&self) -> f64 {
        if self.p_hat.is_empty() {
            return 0.0;
        }
        self.p_hat.iter().map(|p| p.max().1).sum::<f64>() / self.p_hat.len() as f64
    }
}

fn fallback<T: Clone>(result: Result<T>, raw: &T, degenerate: &mut usize) -> Result<T> {
    match result {
        Err(Error::DegenerateCalibration) => {
            *degenerate += 1;
            Ok(raw.clone())
        }
        other => other,
    }
}

/// Builds calibrated pseudo-labels from teacher logits and embeddings of the
/// weak unlabeled view. Returns the alignment state advanced by this batch
/// (unchanged when alignment is disabled).
pub fn pseudo_label_step(
    logits: ArrayView2<f64>,
    z: ArrayView2<f64>,
    buffer: &LabeledMemoryBuffer,
    align: &AlignmentState,
    config: &TrainConfig,
) -> Result<(PseudoLabelBundle, AlignmentState)> {
    if logits.nrows() != z.nrows() {
        return Err(Error::input("logits and embeddings differ in batch size"));
    }
    if logits.ncols() != buffer.num_classes() || z.ncols() != buffer.dim() {
        return Err(Error::input("teacher outputs do not match the buffer shape"));
    }
    let raw: Vec<SemanticDistribution> = logits
        .outer_iter()
        .map(|row| semantic_similarity(row.as_slice().expect("standard layout")))
        .collect::<Result<_>>()?;
    let (p_weak, next_align) = if config.distribution_alignment {
        distribution_align_batch(&raw, align)?
    } else {
        (raw, align.clone())
    };

    let labels = buffer.labels();
    let l = buffer.num_classes();
    let mut degenerate = 0;
    let mut q_weak = Vec::with_capacity(p_weak.len());
    let mut p_hat = Vec::with_capacity(p_weak.len());
    let mut q_hat = Vec::with_capacity(p_weak.len());
    for (p, zrow) in p_weak.iter().zip(z.outer_iter()) {
        let q = instance_similarity(zrow.as_slice().expect("standard layout"), buffer.features(), config.temperature)?;
        let p_unfold = unfold(p, labels)?;
        let q_agg = aggregate(&q, labels, l)?;
        let ph = match config.p_calibration {
            SemanticCalibration::Smoothing => smooth_calibrate(p, &q_agg, config.alpha)?,
            SemanticCalibration::Scaling => fallback(scale_semantic(p, &q_agg), p, &mut degenerate)?,
        };
        let qh = match config.q_calibration {
            InstanceCalibration::Scaling => fallback(scale_calibrate(&q, &p_unfold), &q, &mut degenerate)?,
            InstanceCalibration::Smoothing => fallback(smooth_instance(&q, &p_unfold, config.alpha), &q, &mut degenerate)?,
            InstanceCalibration::Off => q.clone(),
        };
        q_weak.push(q);
        p_hat.push(ph);
        q_hat.push(qh);
    }
    let mask = confidence_mask(&p_hat, config.tau);
    Ok((
        PseudoLabelBundle {
            p_weak,
            q_weak,
            p_hat,
            q_hat,
            mask,
            degenerate,
        },
        next_align,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn one_per_class() -> LabeledMemoryBuffer {
        LabeledMemoryBuffer::from_embeddings(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, vec![0, 1, 2], 3).unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            distribution_alignment: false,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn alpha_one_returns_aligned_p() {
        let buffer = one_per_class();
        let align = AlignmentState::new(3, 4).unwrap();
        let logits = array![[2.0, 0.5, -1.0], [0.0, 0.1, 0.3]];
        let z = array![[0.3, 0.9, 0.1], [1.0, 0.2, 0.2]];
        let cfg = TrainConfig {
            alpha: 1.0,
            distribution_alignment: true,
            ..TrainConfig::toy()
        };
        let (bundle, next) = pseudo_label_step(logits.view(), z.view(), &buffer, &align, &cfg).unwrap();
        assert_eq!(bundle.p_hat, bundle.p_weak);
        assert_eq!(next.window_len(), 1);
    }

    #[test]
    fn uniform_p_leaves_q_unchanged() {
        let buffer = one_per_class();
        let align = AlignmentState::new(3, 4).unwrap();
        let logits = Array2::zeros((1, 3));
        let z = array![[0.3, 0.9, 0.1]];
        let (bundle, _) = pseudo_label_step(logits.view(), z.view(), &buffer, &align, &config()).unwrap();
        for (a, b) in bundle.q_hat[0].probs().iter().zip(bundle.q_weak[0].probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn tau_one_masks_everything() {
        let buffer = one_per_class();
        let align = AlignmentState::new(3, 4).unwrap();
        let logits = array![[50.0, 0.0, 0.0]];
        let z = array![[1.0, 0.0, 0.0]];
        let cfg = TrainConfig { tau: 1.0, ..config() };
        let (bundle, _) = pseudo_label_step(logits.view(), z.view(), &buffer, &align, &cfg).unwrap();
        assert_eq!(bundle.mask, vec![false]);
        assert_eq!(bundle.retained_fraction(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let buffer = one_per_class();
        let align = AlignmentState::new(3, 4).unwrap();
        let logits = Array2::zeros((2, 3));
        let z = Array2::ones((2, 4));
        assert!(pseudo_label_step(logits.view(), z.view(), &buffer, &align, &config()).is_err());
    }
}
