use super::{fluctuation_score, DistanceTrace, PlotData};
use crate::error::{Error, Result};
use crate::network::{insert_projectors, Network};
use crate::partition::Decomposition;
use crate::train::{run_stablekd, run_vanilla_kd, OptimConfig, RunOutput, Splits, StageSchedule, TrainConfig};

/// Vanilla KD runs that differ only in peak learning rate.
#[derive(Clone, Debug)]
pub struct FluctuationRuns {
    pub lrs: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

impl FluctuationRuns {
    pub fn plot(&self) -> PlotData {
        let mut p = PlotData::new();
        for (lr, curve) in self.lrs.iter().zip(&self.curves) {
            p.add(format!("val_acc_lr{lr}"), curve.clone());
        }
        p
    }
}

pub fn experiment_fluctuation(
    teacher: &Network<f32>,
    student: &Network<f32>,
    lrs: &[f64],
    alpha: f64,
    cfg: &TrainConfig,
    data: Splits<'_>,
) -> Result<FluctuationRuns> {
    let mut curves = Vec::with_capacity(lrs.len());
    for &lr in lrs {
        let run_cfg = TrainConfig { optim: OptimConfig { max_lr: lr, ..cfg.optim }, ..cfg.clone() };
        curves.push(run_vanilla_kd(teacher, student.clone(), alpha, &run_cfg, data)?.val_curve());
    }
    Ok(FluctuationRuns { lrs: lrs.to_vec(), scores: curves.iter().map(|c| fluctuation_score(c)).collect(), curves })
}

/// Backbones compared by the head-distance experiment.
pub struct Backbones {
    pub random_small: Network<f32>,
    pub pretrained_small: Network<f32>,
    pub pretrained_large: Network<f32>,
}

#[derive(Clone, Debug)]
pub struct HeadDistanceRuns {
    pub conditions: Vec<&'static str>,
    pub traces: Vec<DistanceTrace>,
    pub curves: Vec<Vec<f64>>,
    /// Whether every condition started from bit-identical head parameters.
    pub heads_identical: bool,
}

impl HeadDistanceRuns {
    pub fn plot(&self) -> PlotData {
        let mut p = PlotData::new();
        for (name, curve) in self.conditions.iter().zip(&self.curves) {
            p.add(format!("val_acc_{name}"), curve.clone());
        }
        p
    }

    /// Cumulative head distance of each condition after `fraction` of the
    /// steps.
    pub fn early_cumulative(&self, fraction: f64) -> Vec<f64> {
        self.traces.iter().map(|t| t.cumulative_at(((t.len() as f64) * fraction).round() as usize)).collect()
    }
}

/// Trains each backbone under vanilla KD with a freshly initialized head,
/// all heads drawn from `head_seed`, and records the head's step distances.
pub fn experiment_head_distance(
    teacher: &Network<f32>,
    backbones: Backbones,
    head_seed: u64,
    alpha: f64,
    cfg: &TrainConfig,
    data: Splits<'_>,
) -> Result<HeadDistanceRuns> {
    let conditions = vec!["random_small", "pretrained_small", "pretrained_large"];
    let mut nets = [backbones.random_small, backbones.pretrained_small, backbones.pretrained_large];
    for net in &mut nets {
        let h = net.head_index();
        net.init_layer(h, head_seed)?;
    }
    let head =
        |n: &Network<f32>| n.layers()[n.head_index()].params.iter().map(|p| p.tensor.clone()).collect::<Vec<_>>();
    if nets.iter().any(|n| head(n).iter().zip(head(&nets[0])).any(|(a, b)| a.shape() != b.shape())) {
        return Err(Error::Incompatible("backbones must feed heads of the same shape".into()));
    }
    let heads_identical = nets.iter().all(|n| head(n) == head(&nets[0]));
    let mut traces = Vec::new();
    let mut curves = Vec::new();
    for net in nets {
        let out = run_vanilla_kd(teacher, net, alpha, cfg, data)?;
        curves.push(out.val_curve());
        traces.push(out.head_trace);
    }
    Ok(HeadDistanceRuns { conditions, traces, curves, heads_identical })
}

/// StableKD runs without recomposition, one per initial block count.
#[derive(Clone, Debug)]
pub struct BlockCountRuns {
    pub ks: Vec<usize>,
    pub runs: Vec<RunOutput>,
    pub scores: Vec<f64>,
}

impl BlockCountRuns {
    pub fn plot(&self) -> PlotData {
        let mut p = PlotData::new();
        for (k, run) in self.ks.iter().zip(&self.runs) {
            p.add(format!("val_acc_k{k}"), run.val_curve());
        }
        p
    }
}

/// StableKD-k/0 for every `k` in `ks`, all from the same student init.
pub fn experiment_block_counts(
    teacher: &Network<f32>,
    student: &Network<f32>,
    ks: &[usize],
    lambda: f64,
    cfg: &TrainConfig,
    data: Splits<'_>,
) -> Result<BlockCountRuns> {
    let cfg = TrainConfig { schedule: StageSchedule::new(vec![cfg.schedule.total_epochs()])?, ..cfg.clone() };
    let mut runs = Vec::with_capacity(ks.len());
    for &k in ks {
        let d = Decomposition::new(teacher, student, k)?;
        let (s, d) = insert_projectors(student, teacher, &d, cfg.seed)?;
        runs.push(run_stablekd(teacher, s, d, lambda, &cfg, data)?);
    }
    Ok(BlockCountRuns {
        ks: ks.to_vec(),
        scores: runs.iter().map(|r| fluctuation_score(&r.val_curve())).collect(),
        runs,
    })
}
