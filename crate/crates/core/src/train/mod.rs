//! The training loop: pseudo-labels, the three losses, optimization and the
//! buffer/EMA updates, plus checkpoints and the metrics log.

mod checkpoint;
mod config;
mod loss;
mod metrics;
mod optimizer;
mod pseudo;
mod run;
mod schedule;
mod step;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{Backbone, InstanceCalibration, InstanceLoss, SemanticCalibration, TrainConfig};
pub use loss::{loss_and_output_grads, student_objective, InstanceTarget, LossBreakdown, OutputGrads, StudentBatch};
pub use metrics::{read_metrics, MetricRecord, MetricsLog};
pub use optimizer::Sgd;
pub use pseudo::{pseudo_label_step, PseudoLabelBundle};
pub use run::{run, unlabeled_probe, RunOptions, RunOutput, DEFAULT_PROBE_LIMIT};
pub use schedule::{cosine_lr, lr_schedule};
pub use step::{StepReport, TrainState, Trainer};
