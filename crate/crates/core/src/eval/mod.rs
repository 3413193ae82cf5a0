//! Evaluation, pseudo-label diagnostics, ablation grids and plots.

mod grid;
mod plot;

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardMode, Network};
use crate::propagation::entropy;
use crate::train::{pseudo_label_step, Checkpoint, TrainConfig, TrainState};

pub use grid::{run_grid, AblationGrid, CellResult, CellSummary, GridAxis, GridResults};
pub use plot::{emit_plots, PLOT_FILES};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Completed training steps.
    pub step: u64,
    pub student_accuracy: f64,
    pub ema_accuracy: f64,
    /// Accuracy of `argmax p_hat` over probe samples above the threshold.
    pub pseudo_label_accuracy: Option<f64>,
    /// Accuracy of `argmax p_hat` over every probe sample.
    pub unlabeled_accuracy: Option<f64>,
    pub retained_fraction: Option<f64>,
    /// Mean entropy of `p_hat` in nats.
    pub mean_entropy: Option<f64>,
}

/// Eval-mode outputs for every row, computed in parallel chunks.
fn forward_all(network: &Network, params: &[f64], inputs: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let parts = (0..inputs.nrows())
        .step_by(EVAL_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let end = (start + EVAL_CHUNK).min(inputs.nrows());
            let fwd = network.forward(params, inputs.slice(ndarray::s![start..end, ..]), ForwardMode::Eval)?;
            Ok((fwd.logits, fwd.z))
        })
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<_> = parts.iter().map(|(l, _)| l.view()).collect();
    let z: Vec<_> = parts.iter().map(|(_, z)| z.view()).collect();
    Ok((
        concatenate(Axis(0), &logits).map_err(|e| Error::input(e.to_string()))?,
        concatenate(Axis(0), &z).map_err(|e| Error::input(e.to_string()))?,
    ))
}

fn accuracy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let correct = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| crate::propagation::argmax(row.as_slice().expect("standard layout")).0 == y)
        .count();
    correct as f64 / labels.len() as f64
}

fn check_dataset(network: &Network, data: &Dataset) -> Result<()> {
    if data.num_classes != network.spec().num_classes {
        return Err(Error::input(format!(
            "dataset has {} classes, model {}",
            data.num_classes,
            network.spec().num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    Ok(())
}

/// Test accuracy of the student and EMA weights, and (given a labeled probe
/// of unlabeled-pool samples) pseudo-label diagnostics from the teacher path
/// on unaugmented inputs. Alignment uses the stored state without updating it.
pub fn evaluate_state(
    network: &Network,
    state: &TrainState,
    config: &TrainConfig,
    test: &Dataset,
    probe: Option<&Dataset>,
) -> Result<EvalReport> {
    check_dataset(network, test)?;
    let (student_logits, _) = forward_all(network, &state.student, &test.inputs)?;
    let (ema_logits, _) = forward_all(network, &state.ema, &test.inputs)?;
    let mut report = EvalReport {
        step: state.step,
        student_accuracy: accuracy(&student_logits, &test.labels),
        ema_accuracy: accuracy(&ema_logits, &test.labels),
        pseudo_label_accuracy: None,
        unlabeled_accuracy: None,
        retained_fraction: None,
        mean_entropy: None,
    };
    if let Some(probe) = probe {
        check_dataset(network, probe)?;
        let (logits, z) = forward_all(network, state.teacher_params(), &probe.inputs)?;
        let (bundle, _) = pseudo_label_step(logits.view(), z.view(), &state.buffer, &state.align, config)?;
        let mut retained = 0usize;
        let mut retained_hits = 0usize;
        let mut hits = 0usize;
        for ((p, &keep), &y) in bundle.p_hat.iter().zip(&bundle.mask).zip(&probe.labels) {
            let hit = p.max().0 == y;
            hits += hit as usize;
            retained += keep as usize;
            retained_hits += (keep && hit) as usize;
        }
        let n = probe.len() as f64;
        report.pseudo_label_accuracy = (retained > 0).then(|| retained_hits as f64 / retained as f64);
        report.unlabeled_accuracy = Some(hits as f64 / n);
        report.retained_fraction = Some(retained as f64 / n);
        report.mean_entropy = Some(bundle.p_hat.iter().map(|p| entropy(p.probs())).sum::<f64>() / n);
    }
    Ok(report)
}

pub fn evaluate(checkpoint: &Checkpoint, test: &Dataset, probe: Option<&Dataset>) -> Result<EvalReport> {
    let network = Network::new(checkpoint.spec.clone())?;
    if network.num_params() != checkpoint.state.student.len() {
        return Err(Error::Checkpoint("parameter count does not match the backbone".into()));
    }
    evaluate_state(&network, &checkpoint.state, &checkpoint.config, test, probe)
}
