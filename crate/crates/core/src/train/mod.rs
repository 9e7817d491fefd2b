//! Staged blockwise training, the end-to-end baselines, SGD and the
//! per-stage cyclic learning-rate schedule.

mod engine;
pub mod optim;
pub mod schedule;

use serde::{Deserialize, Serialize};

pub use engine::{accuracy, run_stablekd, run_supervised, run_vanilla_kd, Splits, Trainer};
pub use optim::{sgd_step, Momentum, OptimConfig};
pub use schedule::{base_lr, lr_at, stage_peak, StageSchedule};

use crate::instrument::DistanceTrace;
use crate::network::Network;
use crate::partition::Decomposition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: StageSchedule,
    pub optim: OptimConfig,
    pub temperature: f64,
    pub seed: u64,
    /// Upper bound on concurrent block workers.
    pub workers: usize,
    /// Record elapsed time in metrics; off keeps metrics reproducible.
    pub log_wall_time: bool,
}

impl TrainConfig {
    pub fn new(schedule: StageSchedule, optim: OptimConfig, seed: u64) -> Self {
        TrainConfig { schedule, optim, temperature: 1.0, seed, workers: 1, log_wall_time: false }
    }
}

/// One line of the metrics stream, written once per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub stage: usize,
    pub k_current: usize,
    pub lr_peak: f64,
    pub loss_ce: f64,
    /// `None` when no teacher is involved.
    pub loss_kl: Option<f64>,
    pub loss_mse: Vec<f64>,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean per-step distance of the classifier head parameters.
    pub step_param_dist_mean: f64,
    pub wall_seconds: Option<f64>,
}

/// Block layout and epoch budget of one stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: usize,
    pub k: usize,
    pub epochs: usize,
    pub teacher_ends: Vec<usize>,
    pub student_ends: Vec<usize>,
}

/// Partitions used by each stage: the initial one, then one recomposition
/// per later stage.
pub fn plan_stages(decomposition: &Decomposition, schedule: &StageSchedule) -> Vec<StagePlan> {
    let mut d = decomposition.clone();
    let mut plans = Vec::with_capacity(schedule.epochs().len());
    for (stage, &epochs) in schedule.epochs().iter().enumerate() {
        if stage > 0 {
            d = d.recompose();
        }
        plans.push(StagePlan {
            stage,
            k: d.k(),
            epochs,
            teacher_ends: d.teacher.ends().to_vec(),
            student_ends: d.student.ends().to_vec(),
        });
    }
    plans
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub student: Network<f32>,
    pub metrics: Vec<MetricRecord>,
    pub head_trace: DistanceTrace,
    /// Wall time per epoch, kept out of the metrics stream.
    pub epoch_seconds: Vec<f64>,
    pub stages: Vec<StagePlan>,
}

impl RunOutput {
    pub fn val_curve(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.val_acc).collect()
    }

    pub fn final_val_acc(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.val_acc)
    }

    /// JSON Lines, one record per epoch.
    pub fn metrics_jsonl(&self) -> String {
        self.metrics.iter().map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n").collect()
    }
}
