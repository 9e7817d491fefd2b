//! Stability diagnostics: step-to-step parameter distance, accuracy
//! fluctuation, and the experiment drivers built on them.

pub mod experiments;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Param, ParamId};

/// Euclidean norm of `curr − prev` over the parameters named in `scope`.
pub fn param_distance<T: Float>(prev: &[Param<T>], curr: &[Param<T>], scope: &[ParamId]) -> Result<f64> {
    fn find<'p, T>(set: &'p [Param<T>], id: &ParamId, side: &str) -> Result<&'p Param<T>> {
        set.iter()
            .find(|p| &p.id == id)
            .ok_or_else(|| Error::Contract(format!("scope parameter {id} missing from {side} snapshot")))
    }
    let mut sq = 0.0;
    for id in scope {
        let (a, b) = (find(prev, id, "previous")?, find(curr, id, "current")?);
        if a.tensor.shape() != b.tensor.shape() {
            return Err(Error::Contract(format!("{id}: shape {:?} vs {:?}", a.tensor.shape(), b.tensor.shape())));
        }
        sq += a.tensor.squared_distance(&b.tensor)?;
    }
    Ok(sq.sqrt())
}

/// Per-step distances and their running sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceTrace {
    pub scope: Vec<ParamId>,
    pub distances: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl DistanceTrace {
    pub fn new(scope: Vec<ParamId>) -> Self {
        DistanceTrace { scope, distances: Vec::new(), cumulative: Vec::new() }
    }

    pub fn push(&mut self, d: f64) {
        let prev = self.cumulative.last().copied().unwrap_or(0.0);
        self.distances.push(d);
        self.cumulative.push(prev + d);
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    /// Cumulative distance after the first `steps` steps.
    pub fn cumulative_at(&self, steps: usize) -> f64 {
        match steps.min(self.len()) {
            0 => 0.0,
            s => self.cumulative[s - 1],
        }
    }

    /// CSV with header `step,distance,cumulative`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,distance,cumulative\n");
        for (i, (d, c)) in self.distances.iter().zip(&self.cumulative).enumerate() {
            let _ = writeln!(out, "{i},{d},{c}");
        }
        out
    }
}

/// Total downward movement of an accuracy curve: `Σ max(0, a[t−1] − a[t])`.
pub fn fluctuation_score(accuracies: &[f64]) -> f64 {
    accuracies.windows(2).map(|w| (w[0] - w[1]).max(0.0)).sum()
}

/// Long-format plot data: one `(epoch, series, value)` row per point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotData {
    series: BTreeMap<String, Vec<f64>>,
}

impl PlotData {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.series.insert(name.into(), values);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.series.get(name).map(Vec::as_slice)
    }

    /// CSV with header `epoch,series,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,series,value\n");
        for (name, values) in &self.series {
            for (e, v) in values.iter().enumerate() {
                let _ = writeln!(out, "{e},{name},{v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn p(id: &str, v: &[f64]) -> Param<f64> {
        Param::new(id, Tensor::from_f64(&[v.len()], v).unwrap())
    }

    #[test]
    fn distance_examples() {
        let a = [p("h", &[0.0, 0.0]), p("body", &[1.0])];
        let b = [p("h", &[3.0, 4.0]), p("body", &[9.0])];
        let scope = [ParamId::new("h")];
        assert_eq!(param_distance(&a, &a, &scope).unwrap(), 0.0);
        assert_eq!(param_distance(&a, &b, &scope).unwrap(), 5.0);
        let c = [p("h", &[0.0, 0.0]), p("body", &[-7.0])];
        assert_eq!(param_distance(&a, &c, &scope).unwrap(), 0.0);
        assert!(matches!(param_distance(&a, &b, &[ParamId::new("x")]), Err(Error::Contract(_))));
    }

    #[test]
    fn fluctuation_examples() {
        assert_eq!(fluctuation_score(&[0.1, 0.2, 0.3]), 0.0);
        assert!((fluctuation_score(&[0.5, 0.4, 0.6]) - 0.1).abs() < 1e-12);
        assert!((fluctuation_score(&[0.3, 0.2, 0.25, 0.1]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn trace_csv() {
        let mut t = DistanceTrace::new(vec![]);
        t.push(1.0);
        t.push(0.5);
        assert_eq!(t.to_csv(), "step,distance,cumulative\n0,1,1\n1,0.5,1.5\n");
        assert_eq!(t.cumulative_at(1), 1.0);
    }
}
