//! The desk-scale tile setup used by the stability and accuracy
//! experiments: dataset, teacher and student architectures, and the
//! optimizer settings each comparison runs with.

use crate::data::{gen_tiles, train_val_split, Dataset};
use crate::error::Result;
use crate::network::{ArchDescription, LayerSpec, Network};
use crate::train::{run_supervised, OptimConfig, Splits, StageSchedule, TrainConfig};

pub const CLASSES: usize = 8;
pub const PER_CLASS: usize = 400;
pub const SIDE: usize = 8;
pub const NOISE: f64 = 0.2;
pub const DATA_SEED: u64 = 1;
pub const VAL_FRACTION: f64 = 0.25;

pub const WIDTHS: [usize; 4] = [8, 12, 16, 24];
/// Width stages followed by a 2×2 average pool.
pub const POOLS_AFTER: [usize; 2] = [1, 3];

pub const TEACHER_INIT_SEED: u64 = 7;
pub const TEACHER_EPOCHS: usize = 30;
pub const PRETRAIN_INIT_SEED: u64 = 55;
pub const PRETRAIN_EPOCHS: usize = 20;

pub const BATCH_SIZE: usize = 128;
pub const ALPHA: f64 = 0.5;
pub const SUBSET_SEED: u64 = 99;
pub const LAMBDA: f64 = 1.0;

/// One stage of `convs` 3×3 convolutions per entry of `widths`, then a
/// linear classifier over the flattened features.
pub fn conv_stack(
    widths: &[usize],
    convs: usize,
    pools_after: &[usize],
    input_shape: &[usize],
    classes: usize,
) -> ArchDescription {
    let mut layers = Vec::new();
    for (i, &w) in widths.iter().enumerate() {
        for _ in 0..convs {
            layers.push(LayerSpec::Conv2d { out_channels: w, kernel: 3, stride: 1, padding: 1 });
            layers.push(LayerSpec::Relu);
        }
        if pools_after.contains(&i) {
            layers.push(LayerSpec::AvgPool2d { window: 2 });
        }
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Affine { out_features: classes });
    ArchDescription { input_shape: input_shape.to_vec(), classes, layers }
}

pub fn teacher_arch() -> ArchDescription {
    conv_stack(&WIDTHS, 2, &POOLS_AFTER, &[1, SIDE, SIDE], CLASSES)
}

/// Same widths as the teacher at half the depth, so the two classifier
/// heads share a shape.
pub fn student_arch() -> ArchDescription {
    conv_stack(&WIDTHS, 1, &POOLS_AFTER, &[1, SIDE, SIDE], CLASSES)
}

/// Train and validation splits of the tile task.
pub fn tiles() -> Result<(Dataset, Dataset)> {
    let ds = gen_tiles(CLASSES, PER_CLASS, SIDE, NOISE, DATA_SEED)?;
    train_val_split(&ds, VAL_FRACTION)
}

fn supervised_config(epochs: usize, seed: u64) -> Result<TrainConfig> {
    let optim = OptimConfig { max_lr: 0.02, batch_size: 32, ..OptimConfig::baseline() };
    Ok(TrainConfig::new(StageSchedule::new(vec![epochs])?, optim, seed))
}

/// Trains the teacher with plain cross-entropy and returns it frozen.
pub fn train_teacher(data: Splits<'_>) -> Result<Network<f32>> {
    let mut net: Network<f32> = teacher_arch().build()?;
    net.init_params(TEACHER_INIT_SEED);
    let mut teacher = run_supervised(net, &supervised_config(TEACHER_EPOCHS, 1)?, data)?.student;
    teacher.freeze();
    Ok(teacher)
}

/// A student-sized backbone trained with plain cross-entropy.
pub fn pretrain_student(data: Splits<'_>) -> Result<Network<f32>> {
    let mut net: Network<f32> = student_arch().build()?;
    net.init_params(PRETRAIN_INIT_SEED);
    Ok(run_supervised(net, &supervised_config(PRETRAIN_EPOCHS, 2)?, data)?.student)
}

/// Student initialized for one experiment seed.
pub fn student(seed: u64) -> Result<Network<f32>> {
    let mut net: Network<f32> = student_arch().build()?;
    net.init_params(100 + seed);
    Ok(net)
}

/// End-to-end vanilla KD at the baseline learning rate.
pub fn vanilla_config(epochs: usize, seed: u64) -> Result<TrainConfig> {
    let optim = OptimConfig { batch_size: BATCH_SIZE, ..OptimConfig::baseline() };
    Ok(TrainConfig::new(StageSchedule::new(vec![epochs])?, optim, seed))
}

/// Blockwise training over `recompositions + 1` stages at peak rate `max_lr`.
pub fn stablekd_config(epochs: usize, recompositions: usize, max_lr: f64, seed: u64) -> Result<TrainConfig> {
    let optim = OptimConfig { max_lr, batch_size: BATCH_SIZE, ..OptimConfig::stablekd() };
    Ok(TrainConfig::new(StageSchedule::split(epochs, recompositions)?, optim, seed))
}

/// Peak rate for the accuracy comparisons.
pub const STABLEKD_LR: f64 = 0.1;
/// Peak rate for the block-count comparison, high enough that end-to-end
/// training is visibly unstable.
pub const BLOCK_COUNT_LR: f64 = 0.2;
