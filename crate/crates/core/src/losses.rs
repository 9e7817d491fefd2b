//! Training objectives: cross-entropy, temperature-scaled KL, feature MSE,
//! the vanilla KD mix and the blockwise teacher-routed aggregate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::partition::Decomposition;
use crate::tensor::{backward, kernels, Float, Gradients, Tape, Tensor, Var};

pub fn cross_entropy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(kernels::cross_entropy(logits, labels)?.0)
}

/// `T²·KL(p_teacher ‖ p_student)`, averaged over the batch.
pub fn kl_divergence<T: Float>(student: &Tensor<T>, teacher: &Tensor<T>, temperature: T) -> Result<T> {
    Ok(kernels::kl_divergence(student, teacher, temperature)?.0)
}

pub fn mse_feature<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    Ok(kernels::mse(a, b)?.0)
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// `(1−α)·CE + α·KL`.
pub fn vanilla_kd_loss<T: Float>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<T> {
    check_alpha(alpha)?;
    let ce = cross_entropy(student, labels)?;
    let kl = kl_divergence(student, teacher, T::of(temperature))?;
    Ok(T::of(1.0 - alpha) * ce + T::of(alpha) * kl)
}

/// Loss applied to the classifier block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadObjective {
    /// `CE + λ·KL`.
    Blockwise { lambda: f64, temperature: f64 },
    /// `(1−α)·CE + α·KL`.
    Vanilla { alpha: f64, temperature: f64 },
    /// Plain CE, no teacher.
    Supervised,
}

impl HeadObjective {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HeadObjective::Blockwise { lambda, temperature } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
                }
                check_temperature(temperature)
            }
            HeadObjective::Vanilla { alpha, temperature } => {
                check_alpha(alpha)?;
                check_temperature(temperature)
            }
            HeadObjective::Supervised => Ok(()),
        }
    }

    pub fn uses_teacher(&self) -> bool {
        !matches!(self, HeadObjective::Supervised)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {t}")))
    }
}

/// What a block is trained against.
#[derive(Clone, Copy, Debug)]
pub enum BlockTarget<'a, T> {
    /// Teacher activation at the block's output boundary.
    Feature(&'a Tensor<T>),
    Head {
        labels: &'a [usize],
        teacher_logits: Option<&'a Tensor<T>>,
        objective: HeadObjective,
    },
}

/// Tape handles for one block's term.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub loss: Var,
    pub output: Var,
    pub ce: Option<Var>,
    pub kl: Option<Var>,
    pub mse: Option<Var>,
}

/// Records `layers` applied to `input` and the block's loss term.
pub fn record_block_term<T: Float>(
    tape: &mut Tape<T>,
    layers: &[Layer<T>],
    input: &Tensor<T>,
    target: BlockTarget<'_, T>,
) -> Result<TermVars> {
    let x = tape.constant(input.clone());
    let output = crate::network::record_layers(layers, tape, x)?;
    match target {
        BlockTarget::Feature(teacher) => {
            let t = tape.constant(teacher.clone());
            let mse = tape.mse(output, t)?;
            Ok(TermVars { loss: mse, output, ce: None, kl: None, mse: Some(mse) })
        }
        BlockTarget::Head { labels, teacher_logits, objective } => {
            let ce = tape.cross_entropy(output, labels)?;
            let (loss, kl) = match objective {
                HeadObjective::Supervised => (ce, None),
                HeadObjective::Blockwise { lambda, temperature } => {
                    let kl = tape.kl_divergence(output, need_teacher(teacher_logits)?, T::of(temperature))?;
                    let weighted = tape.scale(kl, T::of(lambda));
                    (tape.add(ce, weighted)?, Some(kl))
                }
                HeadObjective::Vanilla { alpha, temperature } => {
                    check_alpha(alpha)?;
                    let kl = tape.kl_divergence(output, need_teacher(teacher_logits)?, T::of(temperature))?;
                    let a = tape.scale(ce, T::of(1.0 - alpha));
                    let b = tape.scale(kl, T::of(alpha));
                    (tape.add(a, b)?, Some(kl))
                }
            };
            Ok(TermVars { loss, output, ce: Some(ce), kl, mse: None })
        }
    }
}

fn need_teacher<T>(t: Option<&Tensor<T>>) -> Result<&Tensor<T>> {
    t.ok_or_else(|| Error::Contract("distillation objective needs teacher logits".into()))
}

/// Teacher activations keyed by exclusive layer end; key 0 is the input.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherRoutes<T> {
    by_end: BTreeMap<usize, Tensor<T>>,
}

impl<T: Float> TeacherRoutes<T> {
    /// Routes holding only the raw input, for teacher-free training.
    pub fn input_only(x: Tensor<T>) -> Self {
        TeacherRoutes { by_end: BTreeMap::from([(0, x)]) }
    }

    /// One teacher forward pass, keeping the activation after each of `ends`.
    pub fn compute(teacher: &Network<T>, ends: &[usize], x: &Tensor<T>) -> Result<Self> {
        let mut by_end = BTreeMap::new();
        by_end.insert(0, x.clone());
        let last = ends.iter().copied().max().unwrap_or(0);
        if last > teacher.len() {
            return Err(Error::Contract(format!("route end {last} beyond {} teacher layers", teacher.len())));
        }
        let mut h = x.clone();
        for (i, layer) in teacher.layers()[..last].iter().enumerate() {
            h = layer.apply(&h)?;
            if ends.contains(&(i + 1)) {
                by_end.insert(i + 1, h.clone());
            }
        }
        Ok(TeacherRoutes { by_end })
    }

    /// [`TeacherRoutes::compute`] over row chunks, to bound peak memory.
    pub fn compute_chunked(teacher: &Network<T>, ends: &[usize], x: &Tensor<T>, chunk: usize) -> Result<Self> {
        let n = x.shape()[0];
        if n <= chunk {
            return Self::compute(teacher, ends, x);
        }
        let mut parts: BTreeMap<usize, Vec<Tensor<T>>> = BTreeMap::new();
        for start in (0..n).step_by(chunk.max(1)) {
            let rows = x.slice_rows(start, chunk.min(n - start))?;
            for (end, t) in Self::compute(teacher, ends, &rows)?.by_end {
                parts.entry(end).or_default().push(t);
            }
        }
        let by_end = parts.into_iter().map(|(end, ts)| Ok((end, Tensor::concat_rows(&ts)?))).collect::<Result<_>>()?;
        Ok(TeacherRoutes { by_end })
    }

    pub fn at(&self, end: usize) -> Result<&Tensor<T>> {
        self.by_end
            .get(&end)
            .ok_or_else(|| Error::Contract(format!("no teacher activation cached after layer end {end}")))
    }

    pub fn gather(&self, rows: &[usize]) -> Result<Self> {
        let by_end = self.by_end.iter().map(|(&e, t)| Ok((e, t.gather_rows(rows)?))).collect::<Result<_>>()?;
        Ok(TeacherRoutes { by_end })
    }

    pub fn ends(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_end.keys().copied()
    }
}

/// Input and target of student block `block` (0-based) under teacher routing.
pub fn block_target<'a, T: Float>(
    routes: &'a TeacherRoutes<T>,
    decomposition: &Decomposition,
    block: usize,
    labels: &'a [usize],
    objective: HeadObjective,
) -> Result<(&'a Tensor<T>, BlockTarget<'a, T>)> {
    let k = decomposition.k();
    let tends = decomposition.teacher.ends();
    let input = routes.at(if block == 0 { 0 } else { tends[block - 1] })?;
    let target = if block + 1 == k {
        BlockTarget::Head {
            labels,
            teacher_logits: if objective.uses_teacher() { Some(routes.at(tends[k - 1])?) } else { None },
            objective,
        }
    } else {
        BlockTarget::Feature(routes.at(tends[block])?)
    };
    Ok((input, target))
}

/// Per-component values of the blockwise objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    /// One entry per non-head block.
    pub mse: Vec<f64>,
    pub total: f64,
}

/// Every block's term recorded on one tape; `terms[i]` belongs to block `i`.
pub struct StableKdTape<T> {
    pub tape: Tape<T>,
    pub terms: Vec<TermVars>,
    pub total: Var,
}

impl<T: Float> StableKdTape<T> {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let v = |var: Var| self.tape.value(var).item().map(Float::as_f64);
        let head = self.terms.last().expect("at least one block");
        Ok(LossBreakdown {
            ce: v(head.ce.expect("head has CE"))?,
            kl: head.kl.map(v).transpose()?.unwrap_or(0.0),
            mse: self.terms[..self.terms.len() - 1]
                .iter()
                .map(|t| v(t.mse.expect("feature term")))
                .collect::<Result<_>>()?,
            total: v(self.total)?,
        })
    }
}

/// Records the full blockwise objective: block 1 sees `x`, block `i` sees
/// the teacher's output through block `i−1`, and the head block is scored
/// with `CE + λ·KL`. No student block consumes another student block's
/// output.
pub fn record_stablekd<T: Float>(
    x: &Tensor<T>,
    labels: &[usize],
    teacher: &Network<T>,
    student: &Network<T>,
    decomposition: &Decomposition,
    lambda: f64,
    temperature: f64,
) -> Result<StableKdTape<T>> {
    decomposition.validate(teacher, student)?;
    let objective = HeadObjective::Blockwise { lambda, temperature };
    objective.validate()?;
    let routes = TeacherRoutes::compute(teacher, decomposition.teacher.ends(), x)?;
    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(decomposition.k());
    for (j, range) in decomposition.student.blocks().enumerate() {
        let (input, target) = block_target(&routes, decomposition, j, labels, objective)?;
        terms.push(record_block_term(&mut tape, &student.layers()[range], input, target)?);
    }
    let mut total = terms[0].loss;
    for t in &terms[1..] {
        total = tape.add(total, t.loss)?;
    }
    Ok(StableKdTape { tape, terms, total })
}

pub fn stablekd_loss<T: Float>(
    x: &Tensor<T>,
    labels: &[usize],
    teacher: &Network<T>,
    student: &Network<T>,
    decomposition: &Decomposition,
    lambda: f64,
) -> Result<LossBreakdown> {
    record_stablekd(x, labels, teacher, student, decomposition, lambda, 1.0)?.breakdown()
}

/// Breakdown and gradient of the total with respect to every student
/// parameter.
pub fn stablekd_gradients<T: Float>(
    x: &Tensor<T>,
    labels: &[usize],
    teacher: &Network<T>,
    student: &Network<T>,
    decomposition: &Decomposition,
    lambda: f64,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let rec = record_stablekd(x, labels, teacher, student, decomposition, lambda, 1.0)?;
    let grads = backward(&rec.tape, rec.total)?;
    Ok((rec.breakdown()?, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, LayerSpec};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(&t(&[1, 2], &[1000.0, 0.0]), &[0]).unwrap();
        assert!(ce.abs() < 1e-12);
        let ce = cross_entropy(&t(&[1, 3], &[1.0, 2.0, 3.0]), &[2]).unwrap();
        let oracle = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((ce - oracle).abs() < 1e-12);
        assert!((ce - 0.40761).abs() < 1e-5);
        assert!(matches!(cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn kl_examples() {
        let a = t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.5]);
        assert!(kl_divergence(&a, &a, 1.0).unwrap().abs() < 1e-15);
        let kl = kl_divergence(&t(&[1, 2], &[3f64.ln(), 0.0]), &t(&[1, 2], &[0.0, 0.0]), 1.0).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((kl - oracle).abs() < 1e-12);
        assert!((kl - 0.14384).abs() < 1e-5);
        assert!(matches!(
            kl_divergence(&t(&[1, 2], &[0.0, 0.0]), &t(&[2, 1], &[0.0, 0.0]), 1.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_feature(&t(&[1, 2], &[1.0, 2.0]), &t(&[1, 2], &[3.0, 2.0])).unwrap(), 2.0);
        let z = Tensor::<f64>::zeros(&[2, 3, 4]);
        let o = Tensor::<f64>::full(&[2, 3, 4], 1.0);
        assert_eq!(mse_feature(&z, &o).unwrap(), 1.0);
        assert!(matches!(mse_feature(&z, &t(&[1, 2], &[0.0, 0.0])), Err(Error::Incompatible(_))));
    }

    #[test]
    fn vanilla_examples() {
        let s = t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]);
        let v = vanilla_kd_loss(&s, &s, &[0, 1], 0.5, 1.0).unwrap();
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-12);
        for bad in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(vanilla_kd_loss(&s, &s, &[0, 1], bad, 1.0), Err(Error::Config(_))));
        }
    }

    fn pair() -> (Network<f64>, Network<f64>, Tensor<f64>, Vec<usize>) {
        let specs = [
            LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Affine { out_features: 3 },
        ];
        let mut teacher = build_network(&specs, &[1, 3, 3], 3).unwrap();
        teacher.init_params(1);
        let mut student = build_network(&specs, &[1, 3, 3], 3).unwrap();
        student.init_params(2);
        let x = Tensor::from_f64(&[2, 1, 3, 3], &(0..18).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        (teacher, student, x, vec![0, 2])
    }

    #[test]
    fn perfect_student_reduces_to_teacher_ce() {
        let (teacher, _, x, y) = pair();
        let d = Decomposition::new(&teacher, &teacher, 3).unwrap();
        let b = stablekd_loss(&x, &y, &teacher, &teacher, &d, 1.0).unwrap();
        assert!(b.mse.iter().all(|&m| m == 0.0));
        assert_eq!(b.kl, 0.0);
        let ce = cross_entropy(&teacher.forward(&x).unwrap(), &y).unwrap();
        assert!((b.total - ce).abs() < 1e-12);
    }

    #[test]
    fn single_block_has_no_mse_terms() {
        let (teacher, student, x, y) = pair();
        let d = Decomposition::new(&teacher, &student, 1).unwrap();
        let b = stablekd_loss(&x, &y, &teacher, &student, &d, 0.7).unwrap();
        assert!(b.mse.is_empty());
        let logits = student.forward(&x).unwrap();
        let expect = cross_entropy(&logits, &y).unwrap()
            + 0.7 * kl_divergence(&logits, &teacher.forward(&x).unwrap(), 1.0).unwrap();
        assert!((b.total - expect).abs() < 1e-12);
    }
}
