//! Central-difference oracle for the backward rules.

use super::tape::{backward, Param, ParamId, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst: Option<(ParamId, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn evaluate<F>(f: &F, params: &[Param<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Param<f64>]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Oracle(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares `backward` against central differences for every coordinate of
/// every trainable parameter in `params`.
///
/// `f` records the scalar loss on a fresh tape given a (possibly perturbed)
/// copy of the parameters; it must register them through [`Tape::param`].
pub fn finite_diff_check<F>(params: &[Param<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Param<f64>]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Oracle(format!("step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let analytic = backward(&tape, loss)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let zeros = Tensor::zeros(p.tensor.shape());
        let grad = analytic.get(&p.id).unwrap_or(&zeros);
        for j in 0..p.tensor.numel() {
            let orig = p.tensor.data()[j];
            work[pi].tensor.data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[pi].tensor.data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[pi].tensor.data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p.id.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let x = Param::new("x", Tensor::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap());
        let report = finite_diff_check(&[x], 1e-6, |tape, ps| {
            let v = tape.param(&ps[0]);
            let sq = tape.mul(v, v)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Param::new("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let report = finite_diff_check(&[x], 1e-6, |tape, ps| {
            tape.param(&ps[0]);
            Ok(tape.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_evaluation_is_oracle_error() {
        let x = Param::new("x", Tensor::from_f64(&[1], &[1.0]).unwrap());
        let err = finite_diff_check(&[x], 1e-6, |tape, ps| {
            let v = tape.param(&ps[0]);
            Ok(tape.scale(v, f64::INFINITY))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
    }
}
