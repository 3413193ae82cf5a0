use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    lr_schedule, pseudo_label_step, student_objective, InstanceLoss, InstanceTarget, LossBreakdown, Sgd,
    StudentBatch, TrainConfig,
};
use crate::augment::{augment_batch, AugmentPolicy, Strength};
use crate::data::{BatchPair, BatchSampler, Benchmark};
use crate::error::{Error, Result};
use crate::memory::{ema_update, BufferMode, EmaSchedule, LabeledMemoryBuffer};
use crate::model::{normalize_rows, Forward, ForwardMode, Network};
use crate::propagation::AlignmentState;
use crate::rng::{derive_seed, Stream};

/// Per-step record written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub l_s: f64,
    pub l_u: f64,
    pub l_in: f64,
    pub l_overall: f64,
    pub retained_fraction: f64,
    pub mean_max_confidence: f64,
    pub lr: f64,
    /// Samples whose calibration fell back to the raw distribution.
    pub degenerate: usize,
    /// Ground-truth accuracy of `argmax p_hat` over the retained samples of
    /// this batch; `None` when nothing was retained.
    pub batch_pseudo_label_accuracy: Option<f64>,
    /// Same over every unlabeled sample of the batch.
    pub batch_unlabeled_accuracy: f64,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub student: Vec<f64>,
    /// Separate teacher weights; only present in student-teacher mode.
    pub teacher: Option<Vec<f64>>,
    /// Parameter average used for EMA evaluation.
    pub ema: Vec<f64>,
    pub optimizer: Sgd,
    pub buffer: LabeledMemoryBuffer,
    pub align: AlignmentState,
}

impl TrainState {
    /// Weights that produce pseudo-labels and buffer embeddings.
    pub fn teacher_params(&self) -> &[f64] {
        self.teacher.as_deref().unwrap_or(&self.student)
    }
}

#[derive(Serialize)]
struct FailureDump<'a> {
    labeled: &'a [usize],
    unlabeled: &'a [usize],
    losses: LossBreakdown,
    lr: f64,
    retained: usize,
}

/// Immutable context for training on one benchmark.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    config: TrainConfig,
    network: Network,
    policy: AugmentPolicy,
    schedule: EmaSchedule,
    bench: &'a Benchmark,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, bench: &'a Benchmark) -> Result<Self> {
        config.validate()?;
        bench.split.validate(&bench.train)?;
        let modality = bench.train.modality;
        let network = Network::new(config.backbone_spec(modality, bench.train.num_classes)?)?;
        let policy = config.augment_policy(modality)?;
        let schedule = config.ema_schedule(bench.split.num_labeled())?;
        Ok(Self {
            config,
            network,
            policy,
            schedule,
            bench,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn benchmark(&self) -> &Benchmark {
        self.bench
    }

    pub fn buffer_mode(&self) -> BufferMode {
        self.schedule.mode
    }

    pub fn sampler(&self) -> Result<BatchSampler> {
        BatchSampler::new(
            self.bench.split.num_labeled(),
            self.bench.split.unlabeled.len(),
            self.config.batch_size,
            self.config.mu,
            self.config.seed,
        )
    }

    /// Fresh parameters and a buffer filled with teacher embeddings of the
    /// (unaugmented) labeled samples.
    pub fn init_state(&self) -> Result<TrainState> {
        let student = self.network.init_params(self.config.seed);
        let split = &self.bench.split;
        let inputs = self.bench.train.gather(&split.labeled_indices());
        let fwd = self.network.forward(&student, inputs.view(), ForwardMode::Eval)?;
        let buffer = LabeledMemoryBuffer::from_embeddings(
            fwd.z.iter().copied().collect(),
            self.network.spec().projection_dim,
            split.labeled_classes(),
            self.bench.train.num_classes,
        )?;
        let teacher = (self.schedule.mode == BufferMode::StudentTeacher).then(|| student.clone());
        Ok(TrainState {
            step: 0,
            teacher,
            ema: student.clone(),
            optimizer: Sgd::new(
                student.len(),
                self.config.sgd_momentum,
                self.config.nesterov,
                self.config.weight_decay,
            ),
            student,
            buffer,
            align: AlignmentState::new(self.bench.train.num_classes, self.config.da_window)?,
        })
    }

    fn augment(&self, x: &Array2<f64>, strength: Strength, stream: Stream, step: u64) -> Result<Array2<f64>> {
        augment_batch(x.view(), &self.policy, strength, stream, self.config.seed, step)
    }

    /// One iteration: pseudo-labels from the teacher path, student losses,
    /// optimizer step, teacher EMA, buffer write. `state` is left untouched
    /// when an error is returned.
    pub fn train_step(&self, state: &mut TrainState, batch: &BatchPair) -> Result<StepReport> {
        let cfg = &self.config;
        let step = state.step;
        if batch.step != step {
            return Err(Error::input(format!("batch for step {} given at step {step}", batch.step)));
        }
        let split = &self.bench.split;
        let train = &self.bench.train;
        let labeled_rows: Vec<usize> = batch.labeled.iter().map(|&j| split.labeled[j].index).collect();
        let labels: Vec<usize> = batch.labeled.iter().map(|&j| split.labeled[j].class).collect();
        let unlabeled_rows: Vec<usize> = batch.unlabeled.iter().map(|&j| split.unlabeled[j]).collect();

        let x_l = self.augment(&train.gather(&labeled_rows), Strength::Weak, Stream::LabeledAugment, step)?;
        let x_u = train.gather(&unlabeled_rows);
        let x_w = self.augment(&x_u, Strength::Weak, Stream::WeakAugment, step)?;
        let x_s = self.augment(&x_u, Strength::Strong, Stream::StrongAugment, step)?;

        let teacher = state.teacher_params();
        let t_l = self.network.forward(teacher, x_l.view(), ForwardMode::Eval)?;
        let t_u = self.network.forward(teacher, x_w.view(), ForwardMode::Eval)?;
        let diverged = |losses: LossBreakdown, lr: f64, retained: usize| -> Result<Error> {
            let dump = FailureDump {
                labeled: &labeled_rows,
                unlabeled: &unlabeled_rows,
                losses,
                lr,
                retained,
            };
            Ok(Error::NonFiniteLoss {
                step,
                detail: serde_json::to_string(&dump)?,
            })
        };
        let outputs_finite = |f: &Forward| f.logits.iter().chain(f.z.iter()).all(|v| v.is_finite());
        if !outputs_finite(&t_l) || !outputs_finite(&t_u) {
            // weights blew up on the previous step
            let nan = LossBreakdown {
                l_s: f64::NAN,
                l_u: f64::NAN,
                l_in: f64::NAN,
                l_overall: f64::NAN,
            };
            return Err(diverged(nan, lr_schedule(step, cfg)?, 0)?);
        }
        let (bundle, next_align) = pseudo_label_step(t_u.logits.view(), t_u.z.view(), &state.buffer, &state.align, cfg)?;

        let weak_reference;
        let instance = match cfg.instance_loss {
            InstanceLoss::Matching => InstanceTarget::Matching {
                reference: state.buffer.features_view(),
                targets: &bundle.q_hat,
            },
            InstanceLoss::InfoNce => {
                weak_reference = normalize_rows(&t_u.z).0;
                InstanceTarget::InfoNce {
                    reference: weak_reference.view(),
                }
            }
        };
        let modes = (
            ForwardMode::Train {
                seed: derive_seed(cfg.seed, Stream::Dropout, step, 0),
            },
            ForwardMode::Train {
                seed: derive_seed(cfg.seed, Stream::Dropout, step, 1),
            },
        );
        let student_batch = StudentBatch {
            labeled: x_l.view(),
            labels: &labels,
            strong: x_s.view(),
            modes,
        };
        let (losses, grads) = student_objective(&self.network, &state.student, student_batch, &bundle, instance, cfg)?;
        let lr = lr_schedule(step, cfg)?;
        if !losses.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged(losses, lr, bundle.mask.iter().filter(|&&m| m).count())?);
        }

        // buffer rows written after the optimizer step, from the pre-step teacher
        let (z_l, _) = normalize_rows(&t_l.z);
        let mut seen = vec![false; state.buffer.len()];
        let mut write_idx = Vec::new();
        let mut write_emb = Vec::new();
        for (&j, row) in batch.labeled.iter().zip(z_l.outer_iter()) {
            if !std::mem::replace(&mut seen[j], true) {
                write_idx.push(j);
                write_emb.extend(row.iter());
            }
        }
        let mut buffer = state.buffer.clone();
        buffer.update(&self.schedule, &write_idx, &write_emb)?;

        let truth = train.gather_labels(&unlabeled_rows);
        let mut retained_correct = 0usize;
        let mut all_correct = 0usize;
        for ((p, &keep), &y) in bundle.p_hat.iter().zip(&bundle.mask).zip(&truth) {
            let hit = p.max().0 == y;
            all_correct += hit as usize;
            retained_correct += (hit && keep) as usize;
        }
        let retained = bundle.mask.iter().filter(|&&m| m).count();

        state.optimizer.step(&mut state.student, &grads, lr)?;
        if let Some(t) = state.teacher.as_mut() {
            ema_update(t, &state.student, self.schedule.momentum)?;
        }
        ema_update(&mut state.ema, &state.student, cfg.eval_ema)?;
        state.buffer = buffer;
        state.align = next_align;
        state.step += 1;

        Ok(StepReport {
            step,
            l_s: losses.l_s,
            l_u: losses.l_u,
            l_in: losses.l_in,
            l_overall: losses.l_overall,
            retained_fraction: bundle.retained_fraction(),
            mean_max_confidence: bundle.mean_max_confidence(),
            lr,
            degenerate: bundle.degenerate,
            batch_pseudo_label_accuracy: (retained > 0).then(|| retained_correct as f64 / retained as f64),
            batch_unlabeled_accuracy: all_correct as f64 / truth.len() as f64,
        })
    }
}
