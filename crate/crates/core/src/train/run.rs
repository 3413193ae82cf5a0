use std::path::{Path, PathBuf};

use log::info;

use super::{Checkpoint, MetricRecord, MetricsLog, StepReport, TrainConfig, Trainer};
use crate::data::{Benchmark, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_state, EvalReport};

/// Default cap on the unlabeled samples used for pseudo-label diagnostics.
pub const DEFAULT_PROBE_LIMIT: usize = 4096;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Directory for `metrics.jsonl`, `config.kv` and checkpoints; nothing is
    /// written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this snapshot instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Stop once this many steps have completed (the schedule still spans
    /// `config.steps`).
    pub stop_after: Option<u64>,
    pub probe_limit: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            resume: None,
            stop_after: None,
            probe_limit: DEFAULT_PROBE_LIMIT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepReport>,
    pub evals: Vec<EvalReport>,
}

impl RunOutput {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.evals.last()
    }
}

/// The first `limit` samples of the unlabeled pool, with their hidden labels.
pub fn unlabeled_probe(bench: &Benchmark, limit: usize) -> Result<Dataset> {
    let rows: Vec<usize> = bench.split.unlabeled.iter().copied().take(limit).collect();
    Dataset::new(
        bench.train.gather(&rows),
        bench.train.gather_labels(&rows),
        bench.train.num_classes,
        bench.train.modality,
    )
}

fn check_resume(ckpt: &Checkpoint, config: &TrainConfig, trainer: &Trainer<'_>) -> Result<()> {
    let comparable = TrainConfig {
        eval_every: config.eval_every,
        checkpoint_every: config.checkpoint_every,
        ..ckpt.config.clone()
    };
    if &comparable != config {
        return Err(Error::Checkpoint("checkpoint was written with a different config".into()));
    }
    if &ckpt.spec != trainer.network().spec() {
        return Err(Error::Checkpoint("checkpoint backbone differs from the config".into()));
    }
    if ckpt.dataset_id != trainer.benchmark().split.dataset_id {
        return Err(Error::Checkpoint(format!(
            "checkpoint belongs to dataset `{}`, not `{}`",
            ckpt.dataset_id,
            trainer.benchmark().split.dataset_id
        )));
    }
    if ckpt.state.student.len() != trainer.network().num_params() {
        return Err(Error::Checkpoint("checkpoint parameter count differs".into()));
    }
    Ok(())
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:08}.bin"))
}

/// Trains for `config.steps` steps (or until `stop_after`), evaluating every
/// `eval_every` steps and at the end.
pub fn run(config: &TrainConfig, bench: &Benchmark, options: RunOptions) -> Result<RunOutput> {
    let trainer = Trainer::new(config.clone(), bench)?;
    let mut state = match options.resume {
        Some(ckpt) => {
            check_resume(&ckpt, config, &trainer)?;
            ckpt.state
        }
        None => trainer.init_state()?,
    };
    let resumed = state.step > 0;
    let end = options.stop_after.unwrap_or(config.steps).min(config.steps);
    let probe = unlabeled_probe(bench, options.probe_limit)?;

    let mut log = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let kv = dir.join("config.kv");
            std::fs::write(&kv, config.to_kv()).map_err(|e| Error::io(&kv, e))?;
            Some(MetricsLog::open(&dir.join("metrics.jsonl"), resumed)?)
        }
        None => None,
    };
    let snapshot = |state: &super::TrainState| Checkpoint {
        config: config.clone(),
        spec: trainer.network().spec().clone(),
        dataset_id: bench.split.dataset_id.clone(),
        state: state.clone(),
    };

    let mut sampler = trainer.sampler()?;
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let mut last_eval = None;
    while state.step < end {
        let batch = sampler.batch(state.step);
        let report = trainer.train_step(&mut state, &batch)?;
        if let Some(log) = log.as_mut() {
            log.write(&MetricRecord::Step(report.clone()))?;
        }
        steps.push(report);
        if config.eval_every > 0 && state.step % config.eval_every == 0 {
            let eval = evaluate_state(trainer.network(), &state, config, &bench.test, Some(&probe))?;
            info!(
                "step {}: test {:.4} (ema {:.4}), retained {:.3}",
                state.step, eval.student_accuracy, eval.ema_accuracy, eval.retained_fraction.unwrap_or(0.0)
            );
            if let Some(log) = log.as_mut() {
                log.write(&MetricRecord::Eval(eval.clone()))?;
            }
            evals.push(eval);
            last_eval = Some(state.step);
        }
        if let (Some(dir), true) = (&options.out_dir, config.checkpoint_every > 0) {
            if state.step % config.checkpoint_every == 0 {
                snapshot(&state).save(&checkpoint_path(dir, state.step))?;
            }
        }
    }
    if last_eval != Some(state.step) {
        let eval = evaluate_state(trainer.network(), &state, config, &bench.test, Some(&probe))?;
        if let Some(log) = log.as_mut() {
            log.write(&MetricRecord::Eval(eval.clone()))?;
        }
        evals.push(eval);
    }
    let checkpoint = snapshot(&state);
    if let Some(dir) = &options.out_dir {
        checkpoint.save(&dir.join("final.bin"))?;
    }
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }
    Ok(RunOutput {
        checkpoint,
        steps,
        evals,
    })
}
