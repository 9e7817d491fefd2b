use std::time::Instant;

use super::optim::{sgd_step, Momentum};
use super::schedule::{lr_at, stage_peak, StageSchedule};
use super::{plan_stages, MetricRecord, RunOutput, TrainConfig};
use crate::data::{batches, epoch_seed, Dataset};
use crate::error::{Error, Result};
use crate::instrument::{param_distance, DistanceTrace};
use crate::losses::{block_target, record_block_term, BlockTarget, HeadObjective, TeacherRoutes};
use crate::network::{Layer, Network};
use crate::partition::{Decomposition, Partition};
use crate::tensor::{backward, Float, Param, ParamId, Tape, Tensor};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

/// Fraction of `ds` that `net` classifies correctly.
pub fn accuracy(net: &Network<f32>, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    let rows: Vec<usize> = (0..ds.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (x, y) = ds.batch(chunk)?;
        let pred = net.forward(&x)?.argmax_rows()?;
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

struct BlockOutcome {
    ce: f64,
    kl: Option<f64>,
    mse: Option<f64>,
    correct: usize,
}

/// Forward, backward and SGD step for one block on its own tape.
fn train_block(
    layers: &mut [Layer<f32>],
    momentum: &mut Momentum<f32>,
    input: &Tensor<f32>,
    target: BlockTarget<'_, f32>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<BlockOutcome> {
    let mut tape = Tape::new();
    let vars = record_block_term(&mut tape, layers, input, target)?;
    let loss = tape.value(vars.loss).item()?;
    if !loss.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {loss}; training diverged")));
    }
    let grads = backward(&tape, vars.loss)?;
    let value = |v| tape.value(v).item().map(Float::as_f64);
    let correct = match target {
        BlockTarget::Head { labels, .. } => {
            let pred = tape.value(vars.output).argmax_rows()?;
            pred.iter().zip(labels).filter(|(p, y)| p == y).count()
        }
        BlockTarget::Feature(_) => 0,
    };
    let outcome = BlockOutcome {
        ce: vars.ce.map(value).transpose()?.unwrap_or(0.0),
        kl: vars.kl.map(value).transpose()?,
        mse: vars.mse.map(value).transpose()?,
        correct,
    };
    drop(tape);
    sgd_step(
        layers.iter_mut().flat_map(|l| l.params.iter_mut()),
        &grads,
        momentum,
        lr,
        cfg.optim.momentum,
        cfg.optim.weight_decay,
    )?;
    Ok(outcome)
}

/// Splits `items` into consecutive runs ending at each of `ends`.
fn split_blocks<'a, X>(mut items: &'a mut [X], ends: &[usize]) -> Vec<&'a mut [X]> {
    let mut out = Vec::with_capacity(ends.len());
    let mut start = 0;
    for &end in ends {
        let (block, rest) = std::mem::take(&mut items).split_at_mut(end - start);
        out.push(block);
        items = rest;
        start = end;
    }
    out
}

/// Runs `f` on every job using up to `workers` threads; job `i` goes to
/// worker `i mod workers`. Results come back in job order.
fn run_jobs<J: Send, R: Send>(jobs: Vec<J>, workers: usize, f: impl Fn(J) -> Result<R> + Sync) -> Result<Vec<R>> {
    let n = jobs.len();
    let w = workers.clamp(1, n.max(1));
    if w == 1 {
        return jobs.into_iter().map(f).collect();
    }
    let mut buckets: Vec<Vec<(usize, J)>> = (0..w).map(|_| Vec::new()).collect();
    for (i, job) in jobs.into_iter().enumerate() {
        buckets[i % w].push((i, job));
    }
    let mut slots: Vec<Option<Result<R>>> = (0..n).map(|_| None).collect();
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = buckets
            .into_iter()
            .map(|bucket| s.spawn(move || bucket.into_iter().map(|(i, j)| (i, f(j))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("block worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Stage-by-stage training state.
pub struct Trainer<'a> {
    student: Network<f32>,
    decomposition: Decomposition,
    objective: HeadObjective,
    cfg: TrainConfig,
    data: Splits<'a>,
    routes: TeacherRoutes<f32>,
    momentum: Vec<Momentum<f32>>,
    stage: usize,
    epoch: usize,
    step: usize,
    steps_per_epoch: usize,
    head_scope: Vec<ParamId>,
    trace: DistanceTrace,
    metrics: Vec<MetricRecord>,
    epoch_seconds: Vec<f64>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(
        teacher: Option<&Network<f32>>,
        student: Network<f32>,
        decomposition: Decomposition,
        objective: HeadObjective,
        cfg: TrainConfig,
        data: Splits<'a>,
    ) -> Result<Self> {
        cfg.optim.validate()?;
        objective.validate()?;
        if cfg.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if data.train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if data.val.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        for ds in [data.train, data.val] {
            if ds.sample_shape() != student.input_shape() || ds.classes() != student.classes() {
                return Err(Error::Incompatible(format!(
                    "dataset samples {:?} with {} classes do not fit a network taking {:?} with {} classes",
                    ds.sample_shape(),
                    ds.classes(),
                    student.input_shape(),
                    student.classes()
                )));
            }
        }
        let (x, _) = data.train.tensor()?;
        let routes = match (teacher, objective.uses_teacher()) {
            (Some(t), true) => {
                if !t.is_frozen() {
                    return Err(Error::Contract("the teacher must be frozen".into()));
                }
                decomposition.validate(t, &student)?;
                TeacherRoutes::compute_chunked(t, decomposition.teacher.ends(), &x, EVAL_CHUNK)?
            }
            (None, true) => return Err(Error::Contract("distillation needs a teacher".into())),
            (_, false) => {
                if decomposition.k() != 1 {
                    return Err(Error::Contract("teacher-free training runs end to end".into()));
                }
                decomposition.student.validate(&student)?;
                TeacherRoutes::input_only(x)
            }
        };
        let head_scope: Vec<ParamId> =
            student.layers()[student.head_index()].params.iter().map(|p| p.id.clone()).collect();
        let k = decomposition.k();
        Ok(Trainer {
            steps_per_epoch: data.train.len().div_ceil(cfg.optim.batch_size),
            student,
            decomposition,
            objective,
            cfg,
            data,
            routes,
            momentum: (0..k).map(|_| Momentum::new()).collect(),
            stage: 0,
            epoch: 0,
            step: 0,
            trace: DistanceTrace::new(head_scope.clone()),
            head_scope,
            metrics: Vec::new(),
            epoch_seconds: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn student(&self) -> &Network<f32> {
        &self.student
    }

    pub fn decomposition(&self) -> &Decomposition {
        &self.decomposition
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    pub fn is_finished(&self) -> bool {
        self.epoch == self.cfg.schedule.total_epochs()
    }

    /// Merges blocks pairwise and restarts momentum. Parameters are untouched.
    pub fn advance_stage(&mut self) -> Result<()> {
        if self.stage >= self.cfg.schedule.n() {
            return Err(Error::Contract("no stage left to advance to".into()));
        }
        self.decomposition = self.decomposition.recompose();
        self.momentum = (0..self.decomposition.k()).map(|_| Momentum::new()).collect();
        self.stage += 1;
        Ok(())
    }

    fn head_snapshot(&self) -> Vec<Param<f32>> {
        self.student.layers()[self.student.head_index()].params.clone()
    }

    fn step(&mut self, rows: &[usize], lr: f64, totals: &mut EpochTotals) -> Result<()> {
        let routes = self.routes.gather(rows)?;
        let labels: Vec<usize> = rows.iter().map(|&r| self.data.train.labels()[r]).collect();
        let before = self.head_snapshot();
        let k = self.decomposition.k();
        let mut targets = Vec::with_capacity(k);
        for j in 0..k {
            targets.push(block_target(&routes, &self.decomposition, j, &labels, self.objective)?);
        }
        let blocks = split_blocks(self.student.layers_mut(), self.decomposition.student.ends());
        let jobs: Vec<_> = blocks.into_iter().zip(self.momentum.iter_mut()).zip(targets).collect();
        let cfg = &self.cfg;
        let outcomes = run_jobs(jobs, cfg.workers, |((layers, momentum), (input, target))| {
            train_block(layers, momentum, input, target, lr, cfg)
        })?;

        let b = rows.len() as f64;
        let head = outcomes.last().expect("at least one block");
        totals.ce += head.ce * b;
        if let Some(kl) = head.kl {
            *totals.kl.get_or_insert(0.0) += kl * b;
        }
        totals.mse.resize(k - 1, 0.0);
        for (acc, o) in totals.mse.iter_mut().zip(&outcomes) {
            *acc += o.mse.unwrap_or(0.0) * b;
        }
        totals.correct += head.correct;
        totals.samples += rows.len();

        let d = param_distance(&before, &self.head_snapshot(), &self.head_scope)?;
        self.trace.push(d);
        totals.dist += d;
        totals.steps += 1;
        self.step += 1;
        Ok(())
    }

    /// Trains one epoch, moving to the next stage first if the current one
    /// has used up its epochs.
    pub fn run_epoch(&mut self) -> Result<&MetricRecord> {
        let (stage, _) =
            self.cfg.schedule.locate(self.epoch).ok_or_else(|| Error::Contract("schedule exhausted".into()))?;
        while self.stage < stage {
            self.advance_stage()?;
        }
        let (stage, epoch) = (self.stage, self.epoch);
        self.epoch_inner().map_err(|e| e.in_epoch(stage, epoch))?;
        Ok(self.metrics.last().expect("epoch recorded"))
    }

    fn epoch_inner(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let order = batches(self.data.train, self.cfg.optim.batch_size, epoch_seed(self.cfg.seed, self.epoch as u64))?;
        let mut totals = EpochTotals::default();
        for rows in &order {
            let lr = lr_at(self.step, &self.cfg.schedule, self.steps_per_epoch, self.cfg.optim.max_lr)?;
            self.step(rows, lr, &mut totals)?;
        }
        let n = totals.samples as f64;
        let record = MetricRecord {
            epoch: self.epoch,
            stage: self.stage,
            k_current: self.decomposition.k(),
            lr_peak: stage_peak(self.cfg.optim.max_lr, self.stage),
            loss_ce: totals.ce / n,
            loss_kl: totals.kl.map(|kl| kl / n),
            loss_mse: totals.mse.iter().map(|m| m / n).collect(),
            train_acc: totals.correct as f64 / n,
            val_acc: accuracy(&self.student, self.data.val)?,
            step_param_dist_mean: totals.dist / totals.steps as f64,
            wall_seconds: self.cfg.log_wall_time.then(|| self.started.elapsed().as_secs_f64()),
        };
        self.metrics.push(record);
        self.epoch_seconds.push(t0.elapsed().as_secs_f64());
        self.epoch += 1;
        Ok(())
    }

    /// Runs the remaining epochs and returns the trained student.
    pub fn run(mut self) -> Result<RunOutput> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> RunOutput {
        RunOutput {
            student: self.student,
            metrics: self.metrics,
            head_trace: self.trace,
            epoch_seconds: self.epoch_seconds,
            stages: Vec::new(),
        }
    }
}

#[derive(Default)]
struct EpochTotals {
    ce: f64,
    kl: Option<f64>,
    mse: Vec<f64>,
    correct: usize,
    samples: usize,
    dist: f64,
    steps: usize,
}

/// Staged blockwise distillation: each stage trains every student block
/// against its teacher-routed target, then blocks are merged pairwise.
/// No merge follows the final stage.
pub fn run_stablekd(
    teacher: &Network<f32>,
    student: Network<f32>,
    decomposition: Decomposition,
    lambda: f64,
    cfg: &TrainConfig,
    data: Splits<'_>,
) -> Result<RunOutput> {
    let stages = plan_stages(&decomposition, &cfg.schedule);
    let objective = HeadObjective::Blockwise { lambda, temperature: cfg.temperature };
    let mut out = Trainer::new(Some(teacher), student, decomposition, objective, cfg.clone(), data)?.run()?;
    out.stages = stages;
    Ok(out)
}

/// End-to-end `(1−α)·CE + α·KL` training with one learning-rate cycle over
/// all epochs.
pub fn run_vanilla_kd(
    teacher: &Network<f32>,
    student: Network<f32>,
    alpha: f64,
    cfg: &TrainConfig,
    data: Splits<'_>,
) -> Result<RunOutput> {
    let cfg = single_cycle(cfg)?;
    let d = Decomposition::from_partitions(Partition::whole(teacher.len()), Partition::whole(student.len()))?;
    let stages = plan_stages(&d, &cfg.schedule);
    let objective = HeadObjective::Vanilla { alpha, temperature: cfg.temperature };
    let mut out = Trainer::new(Some(teacher), student, d, objective, cfg, data)?.run()?;
    out.stages = stages;
    Ok(out)
}

/// Plain cross-entropy training, one learning-rate cycle.
pub fn run_supervised(net: Network<f32>, cfg: &TrainConfig, data: Splits<'_>) -> Result<RunOutput> {
    let cfg = single_cycle(cfg)?;
    let whole = Partition::whole(net.len());
    let d = Decomposition::from_partitions(whole.clone(), whole)?;
    let stages = plan_stages(&d, &cfg.schedule);
    let mut out = Trainer::new(None, net, d, HeadObjective::Supervised, cfg, data)?.run()?;
    out.stages = stages;
    Ok(out)
}

fn single_cycle(cfg: &TrainConfig) -> Result<TrainConfig> {
    Ok(TrainConfig { schedule: StageSchedule::new(vec![cfg.schedule.total_epochs()])?, ..cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_spirals, train_val_split};
    use crate::network::{build_network, LayerSpec};
    use crate::train::OptimConfig;

    #[test]
    fn split_blocks_tiles() {
        let mut v: Vec<usize> = (0..6).collect();
        let parts = split_blocks(&mut v, &[2, 3, 6]);
        assert_eq!(parts.iter().map(|p| p.len()).collect::<Vec<_>>(), vec![2, 1, 3]);
    }

    #[test]
    fn run_jobs_keeps_order() {
        let out = run_jobs((0..7).collect(), 3, |i: usize| Ok(i * i)).unwrap();
        assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36]);
    }

    #[test]
    fn supervised_mlp_learns_spirals() {
        let ds = gen_spirals(3, 60, 0.02, 1).unwrap();
        let (train, val) = train_val_split(&ds, 0.25).unwrap();
        let specs = [
            LayerSpec::Affine { out_features: 32 },
            LayerSpec::Relu,
            LayerSpec::Affine { out_features: 32 },
            LayerSpec::Relu,
            LayerSpec::Affine { out_features: 3 },
        ];
        let mut net = build_network::<f32>(&specs, &[2], 3).unwrap();
        net.init_params(0);
        let optim = OptimConfig { batch_size: 16, ..OptimConfig::baseline() };
        let cfg = TrainConfig::new(StageSchedule::new(vec![30]).unwrap(), optim, 3);
        let out = run_supervised(net, &cfg, Splits { train: &train, val: &val }).unwrap();
        assert_eq!(out.metrics.len(), 30);
        assert!(out.metrics[29].loss_ce < out.metrics[0].loss_ce);
        assert!(out.metrics[0].loss_kl.is_none());
    }
}
