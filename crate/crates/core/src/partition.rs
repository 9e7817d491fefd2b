//! Decomposition of a layer stack into contiguous blocks, and the pairwise
//! block merge applied between training stages.
//!
//! A [`Partition`] stores exclusive block end indices over one network's
//! layer list. Teacher and student usually differ in depth, so a
//! [`Decomposition`] carries one partition for each, aligned block for block.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{width_of, Network};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Partition {
    ends: Vec<usize>,
}

impl Partition {
    /// Block ends must be strictly increasing and positive.
    pub fn from_ends(ends: Vec<usize>) -> Result<Self> {
        if ends.is_empty() {
            return Err(Error::Validation("a partition needs at least one block".into()));
        }
        if ends[0] == 0 || ends.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!("block ends {ends:?} overlap or leave an empty block")));
        }
        Ok(Partition { ends })
    }

    /// A single block spanning `layers` layers.
    pub fn whole(layers: usize) -> Self {
        Partition { ends: vec![layers] }
    }

    pub fn k(&self) -> usize {
        self.ends.len()
    }

    pub fn ends(&self) -> &[usize] {
        &self.ends
    }

    /// Layer range of block `i` (0-based).
    pub fn block(&self, i: usize) -> Range<usize> {
        let start = if i == 0 { 0 } else { self.ends[i - 1] };
        start..self.ends[i]
    }

    pub fn blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.k()).map(|i| self.block(i))
    }

    /// Merges blocks (1,2), (3,4), … (1-based); an unpaired last block is
    /// kept. The result has `⌈k/2⌉` blocks.
    pub fn recompose(&self) -> Partition {
        let k = self.k();
        let ends = self.ends.iter().enumerate().filter(|(i, _)| i % 2 == 1 || *i == k - 1).map(|(_, &e)| e).collect();
        Partition { ends }
    }

    /// Checks tiling and head isolation against a network's layer list.
    pub fn validate<T: Float>(&self, net: &Network<T>) -> Result<()> {
        let n = net.len();
        if self.ends.is_empty() {
            return Err(Error::Validation("partition has no blocks".into()));
        }
        if self.ends[0] == 0 {
            return Err(Error::Validation("first block is empty".into()));
        }
        if let Some(w) = self.ends.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!("block ends {} and {} overlap", w[0], w[1])));
        }
        let last = *self.ends.last().unwrap();
        if last != n {
            return Err(Error::Validation(format!("blocks cover {last} layers but the network has {n}")));
        }
        let last_start = self.block(self.k() - 1).start;
        if last_start > net.head_start() {
            return Err(Error::Validation(format!(
                "classifier head (layers {}..{n}) is split across blocks; last block starts at {last_start}",
                net.head_start()
            )));
        }
        Ok(())
    }
}

/// Contiguous runs of body layers sharing one feature width. A new stage
/// starts at each parametric layer whose output width differs from the
/// running width; non-parametric layers stay with the stage before them.
pub fn width_stages<T: Float>(net: &Network<T>) -> Vec<Range<usize>> {
    let body = net.head_start();
    let mut starts: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, layer) in net.layers()[..body].iter().enumerate() {
        if !layer.spec.is_parametric() {
            continue;
        }
        let w = width_of(&layer.out_shape);
        if width != Some(w) {
            starts.push(if starts.is_empty() { 0 } else { i });
            width = Some(w);
        }
    }
    if starts.is_empty() && body > 0 {
        starts.push(0);
    }
    let mut stages = Vec::with_capacity(starts.len());
    for (j, &s) in starts.iter().enumerate() {
        let e = starts.get(j + 1).copied().unwrap_or(body);
        stages.push(s..e);
    }
    stages
}

/// Largest block count the decomposition recipe can produce for `net`.
pub fn max_blocks<T: Float>(net: &Network<T>) -> usize {
    1 + width_stages(net).len()
}

fn block_params<T: Float>(net: &Network<T>, range: Range<usize>) -> usize {
    net.layers()[range].iter().map(|l| l.param_count()).sum()
}

/// All `choose`-element subsets of `0..n` in lexicographic order.
fn combinations(n: usize, choose: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for i in start..=n - left {
            cur.push(i);
            rec(i + 1, n, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if choose <= n {
        rec(0, n, choose, &mut Vec::new(), &mut out);
    }
    out
}

/// Stage indices (into [`width_stages`]) at which the body is cut, chosen so
/// the body blocks' parameter counts are as equal as possible (least sum of
/// squares); ties go to the earliest cuts.
fn choose_stage_cuts<T: Float>(net: &Network<T>, k: usize) -> Result<Vec<usize>> {
    let max_k = max_blocks(net);
    if k == 0 || k > max_k {
        return Err(Error::Config(format!("k = {k} is not feasible for this architecture; maximum k is {max_k}")));
    }
    if k <= 2 {
        return Ok(Vec::new());
    }
    let stages = width_stages(net);
    let candidates = stages.len() - 1;
    let mut best: Option<(u128, Vec<usize>)> = None;
    for combo in combinations(candidates, k - 2) {
        let cuts: Vec<usize> = combo.iter().map(|c| c + 1).collect();
        let mut start = 0;
        let mut score: u128 = 0;
        for &c in cuts.iter().chain(std::iter::once(&stages.len())) {
            let end = if c == stages.len() { net.head_start() } else { stages[c].start };
            let p = block_params(net, start..end) as u128;
            score += p * p;
            start = end;
        }
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, cuts));
        }
    }
    Ok(best.map(|(_, c)| c).unwrap_or_default())
}

fn partition_from_stage_cuts<T: Float>(net: &Network<T>, k: usize, cuts: &[usize]) -> Result<Partition> {
    if k == 1 {
        return Ok(Partition::whole(net.len()));
    }
    let stages = width_stages(net);
    let mut ends = Vec::with_capacity(k);
    for &c in cuts {
        let stage = stages
            .get(c)
            .ok_or_else(|| Error::Config(format!("stage cut {c} out of range for {} width stages", stages.len())))?;
        ends.push(stage.start);
    }
    ends.push(net.head_start());
    ends.push(net.len());
    Partition::from_ends(ends)
}

/// Splits `net` into `k` blocks: the classifier head alone in the last block,
/// the body cut at feature-width changes into `k − 1` blocks of balanced
/// parameter count.
pub fn make_partition<T: Float>(net: &Network<T>, k: usize) -> Result<Partition> {
    let cuts = choose_stage_cuts(net, k)?;
    partition_from_stage_cuts(net, k, &cuts)
}

/// Aligned teacher and student partitions with equal block counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub teacher: Partition,
    pub student: Partition,
}

impl Decomposition {
    /// Derives both partitions from the student's balanced split, cutting the
    /// teacher at the same width stages.
    pub fn new<T: Float>(teacher: &Network<T>, student: &Network<T>, k: usize) -> Result<Self> {
        let cuts = choose_stage_cuts(student, k)?;
        if k > 2 {
            let (ts, ss) = (width_stages(teacher).len(), width_stages(student).len());
            if ts != ss {
                return Err(Error::Incompatible(format!(
                    "teacher has {ts} width stages, student has {ss}; give explicit boundaries"
                )));
            }
        } else if k > max_blocks(teacher) {
            return Err(Error::Config(format!(
                "k = {k} is not feasible for the teacher; maximum k is {}",
                max_blocks(teacher)
            )));
        }
        let d = Decomposition {
            teacher: partition_from_stage_cuts(teacher, k, &cuts)?,
            student: partition_from_stage_cuts(student, k, &cuts)?,
        };
        Ok(d)
    }

    pub fn from_partitions(teacher: Partition, student: Partition) -> Result<Self> {
        if teacher.k() != student.k() {
            return Err(Error::Validation(format!("teacher has {} blocks, student has {}", teacher.k(), student.k())));
        }
        Ok(Decomposition { teacher, student })
    }

    pub fn k(&self) -> usize {
        self.student.k()
    }

    pub fn recompose(&self) -> Decomposition {
        Decomposition { teacher: self.teacher.recompose(), student: self.student.recompose() }
    }

    /// Validates both partitions and checks that every routed boundary
    /// activation has the same per-sample shape in teacher and student.
    pub fn validate<T: Float>(&self, teacher: &Network<T>, student: &Network<T>) -> Result<()> {
        if self.teacher.k() != self.student.k() {
            return Err(Error::Validation(format!(
                "teacher has {} blocks, student has {}",
                self.teacher.k(),
                self.student.k()
            )));
        }
        self.teacher.validate(teacher)?;
        self.student.validate(student)?;
        if teacher.input_shape() != student.input_shape() || teacher.classes() != student.classes() {
            return Err(Error::Incompatible("teacher and student disagree on input shape or class count".into()));
        }
        for (j, (&te, &se)) in self.teacher.ends().iter().zip(self.student.ends()).enumerate() {
            let ts = &teacher.layers()[te - 1].out_shape;
            let ss = &student.layers()[se - 1].out_shape;
            if ts != ss {
                return Err(Error::Incompatible(format!("block {} boundary: teacher {ts:?} vs student {ss:?}", j + 1)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, LayerSpec};
    use proptest::prelude::*;

    fn conv(c: usize) -> LayerSpec {
        LayerSpec::Conv2d { out_channels: c, kernel: 3, stride: 1, padding: 1 }
    }

    /// Four width stages (4, 8, 16, 32) then flatten + affine head.
    pub(crate) fn four_stage() -> Network<f32> {
        let specs = vec![
            conv(4),
            LayerSpec::Relu,
            conv(8),
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { window: 2 },
            conv(16),
            LayerSpec::Relu,
            conv(32),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Affine { out_features: 3 },
        ];
        build_network(&specs, &[1, 4, 4], 3).unwrap()
    }

    #[test]
    fn stages_follow_widths() {
        let net = four_stage();
        assert_eq!(width_stages(&net), vec![0..2, 2..5, 5..7, 7..9]);
        assert_eq!(max_blocks(&net), 5);
    }

    #[test]
    fn k1_is_whole_network() {
        let net = four_stage();
        assert_eq!(make_partition(&net, 1).unwrap().ends(), &[11]);
    }

    #[test]
    fn k2_isolates_head() {
        let net = four_stage();
        assert_eq!(make_partition(&net, 2).unwrap().ends(), &[9, 11]);
    }

    #[test]
    fn k5_is_stages_plus_head() {
        let net = four_stage();
        let p = make_partition(&net, 5).unwrap();
        assert_eq!(p.ends(), &[2, 5, 7, 9, 11]);
        p.validate(&net).unwrap();
    }

    #[test]
    fn k3_balances_parameter_counts() {
        let net = four_stage();
        // stage params: 40, 296, 1168, 4640 → best split is [s1..s3 | s4]
        let p = make_partition(&net, 3).unwrap();
        assert_eq!(p.ends(), &[7, 9, 11]);
    }

    #[test]
    fn infeasible_k_names_maximum() {
        let msg = make_partition(&four_stage(), 6).unwrap_err().to_string();
        assert!(msg.contains("maximum k is 5"), "{msg}");
    }

    #[test]
    fn recompose_examples() {
        let p = Partition::from_ends(vec![2, 5, 7, 9, 11]).unwrap();
        assert_eq!(p.recompose().ends(), &[5, 9, 11]);
        let one = Partition::whole(4);
        assert_eq!(one.recompose(), one);
        let four = Partition::from_ends(vec![1, 2, 3, 4]).unwrap();
        assert_eq!(four.recompose().ends(), &[2, 4]);
    }

    #[test]
    fn head_split_is_invalid() {
        let net = four_stage();
        let p = Partition::from_ends(vec![10, 11]).unwrap();
        assert!(matches!(p.validate(&net), Err(Error::Validation(_))));
    }

    #[test]
    fn overlapping_ends_are_invalid() {
        assert!(Partition::from_ends(vec![3, 3, 11]).is_err());
        let net = four_stage();
        let bad = Partition { ends: vec![5, 4, 11] };
        assert!(matches!(bad.validate(&net), Err(Error::Validation(_))));
    }

    #[test]
    fn short_cover_is_invalid() {
        let p = Partition::from_ends(vec![2, 9]).unwrap();
        assert!(p.validate(&four_stage()).is_err());
    }

    proptest! {
        #[test]
        fn recompose_halves_rounding_up(k in 1usize..64) {
            let p = Partition::from_ends((1..=k).collect()).unwrap();
            prop_assert_eq!(p.recompose().k(), k.div_ceil(2));
            prop_assert_eq!(p.recompose().ends().last().copied(), p.ends().last().copied());
        }

        #[test]
        fn repeated_recompose_reaches_one(k in 1usize..200) {
            let mut p = Partition::from_ends((1..=k).collect()).unwrap();
            let rounds = (k as f64).log2().ceil() as usize;
            for _ in 0..rounds {
                p = p.recompose();
            }
            prop_assert_eq!(p.k(), 1);
        }

        #[test]
        fn make_partition_output_is_valid(k in 1usize..=5) {
            let net = four_stage();
            let p = make_partition(&net, k).unwrap();
            prop_assert_eq!(p.k(), k);
            p.validate(&net).unwrap();
            p.recompose().validate(&net).unwrap();
        }
    }
}
