//! Desk-scale datasets, the SKD1 file format, stratified subsets and
//! seeded batching.

pub mod skd1;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Samples stored flat in network layout (`[features]` or `[C, H, W]`).
///
/// Kept outside [`Tensor`] so that an empty dataset is representable.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    inputs: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        inputs: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || per == 0 {
            return Err(Error::Data(format!("invalid sample shape {sample_shape:?}")));
        }
        if inputs.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} input values for {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { sample_shape, inputs, labels, classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The samples at `rows`, in that order, with the same split tag.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(rows.len() * self.sample_len());
        for &r in rows {
            inputs.extend_from_slice(self.sample(r));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            inputs,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }

    /// Inputs and labels of `rows` as a batch tensor `[rows, ...sample]`.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if rows.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let sub = self.select(rows);
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, sub.inputs)?, sub.labels))
    }

    /// The whole dataset as one batch.
    pub fn tensor(&self) -> Result<(Tensor<f32>, Vec<usize>)> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Point on arm `class` of a `classes`-arm spiral at parameter `t ∈ [0,1]`,
/// already mapped into the unit square.
pub fn spiral_arm(class: usize, classes: usize, t: f64) -> [f64; 2] {
    let r = 0.1 + 0.9 * t;
    let angle = 2.0 * PI * class as f64 / classes as f64 + 1.5 * PI * t;
    [0.5 + 0.4 * r * angle.cos(), 0.5 + 0.4 * r * angle.sin()]
}

/// Interleaved spiral arms with Gaussian noise, one arm per class.
pub fn gen_spirals(classes: usize, per_class: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("spirals need at least 2 classes, got {classes}")));
    }
    let noise =
        Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::Config(format!("noise sigma {noise_sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Arm positions are an evenly spaced grid visited in a seeded order, so
    // any prefix of a class covers the whole arm.
    let orders: Vec<Vec<usize>> = (0..classes)
        .map(|_| {
            let mut o: Vec<usize> = (0..per_class).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let mut inputs = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..per_class {
        for (c, order) in orders.iter().enumerate() {
            let t = if per_class > 1 { order[i] as f64 / (per_class - 1) as f64 } else { 0.5 };
            for v in spiral_arm(c, classes, t) {
                let jitter = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                inputs.push((v + jitter).clamp(0.0, 1.0) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(vec![2], inputs, labels, classes, Split::Train)
}

/// Orientation and spatial frequency of a tile class.
///
/// Orientations cycle through multiples of 45°; each further group of four
/// classes adds one cycle per tile to the frequency.
pub fn tile_pattern(class: usize) -> (f64, f64) {
    let orientation = PI / 4.0 * (class % 4) as f64;
    let frequency = 1.0 + (class / 4) as f64;
    (orientation, frequency)
}

/// Single-channel `side×side` images of oriented sinusoidal gratings, one
/// orientation/frequency pair per class (see [`tile_pattern`]), with random
/// phase and contrast.
pub fn gen_tiles(classes: usize, per_class: usize, side: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if ![8, 16, 32].contains(&side) {
        return Err(Error::Config(format!("tile side must be 8, 16 or 32, got {side}")));
    }
    if classes < 2 {
        return Err(Error::Config(format!("tiles need at least 2 classes, got {classes}")));
    }
    let noise =
        Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::Config(format!("noise sigma {noise_sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(classes * per_class * side * side);
    let mut labels = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for c in 0..classes {
            let (theta, freq) = tile_pattern(c);
            let phase = rng.random::<f64>() * 2.0 * PI;
            let contrast = 0.2 + 0.2 * rng.random::<f64>();
            for y in 0..side {
                for x in 0..side {
                    let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / side as f64;
                    let mut v = 0.5 + contrast * (2.0 * PI * freq * u + phase).sin();
                    if noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    inputs.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(c);
        }
    }
    Dataset::new(vec![1, side, side], inputs, labels, classes, Split::Train)
}

/// Splits off the last `val_fraction` of samples of every class as a
/// validation set; both parts keep the original order.
pub fn train_val_split(ds: &Dataset, val_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction must lie in [0, 1), got {val_fraction}")));
    }
    let counts = ds.class_counts();
    let keep: Vec<usize> = counts.iter().map(|&n| n - (n as f64 * val_fraction).round() as usize).collect();
    let mut seen = vec![0; ds.classes()];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, &y) in ds.labels().iter().enumerate() {
        if seen[y] < keep[y] {
            train.push(i);
        } else {
            val.push(i);
        }
        seen[y] += 1;
    }
    let mut v = ds.select(&val);
    v.split = Split::Val;
    let mut t = ds.select(&train);
    t.split = Split::Train;
    Ok((t, v))
}

/// Samples `fraction` of every class without replacement and shuffles the
/// result.
///
/// Per-class orders come from `seed` alone, so for a fixed seed a smaller
/// fraction always yields a subset of a larger one.
pub fn stratified_subset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction must lie in (0, 1], got {fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut picked = Vec::new();
    for (c, rows) in by_class.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        rows.shuffle(&mut rng);
        let take = (rows.len() as f64 * fraction).round() as usize;
        if take == 0 {
            return Err(Error::Data(format!(
                "fraction {fraction} keeps no samples of class {c} ({} available)",
                rows.len()
            )));
        }
        picked.extend_from_slice(&rows[..take]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    picked.shuffle(&mut rng);
    Ok(ds.select(&picked))
}

/// Seed for epoch `epoch` of a run, independent of any other epoch's.
pub fn epoch_seed(run_seed: u64, epoch: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(epoch);
    rng.next_u64()
}

/// A seeded permutation of `0..ds.len()` cut into batches; the last batch
/// may be short.
pub fn batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spirals_balanced_and_deterministic() {
        let a = gen_spirals(3, 100, 0.05, 4).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a.class_counts(), vec![100, 100, 100]);
        assert_eq!(a, gen_spirals(3, 100, 0.05, 4).unwrap());
        assert_ne!(a, gen_spirals(3, 100, 0.05, 5).unwrap());
        assert!(gen_spirals(1, 10, 0.0, 0).is_err());
    }

    #[test]
    fn noiseless_spirals_lie_on_arms() {
        let ds = gen_spirals(3, 11, 0.0, 9).unwrap();
        let mut used = vec![vec![false; 11]; 3];
        for (i, &y) in ds.labels().iter().enumerate() {
            let hit = (0..11).find(|&g| {
                let [x, z] = spiral_arm(y, 3, g as f64 / 10.0);
                ds.sample(i) == [x as f32, z as f32]
            });
            let g = hit.unwrap_or_else(|| panic!("sample {i} is off its arm"));
            assert!(!used[y][g], "grid point {g} of class {y} repeated");
            used[y][g] = true;
        }
    }

    #[test]
    fn tiles_balanced_and_deterministic() {
        let a = gen_tiles(4, 5, 8, 0.1, 1).unwrap();
        assert_eq!(a.sample_shape(), &[1, 8, 8]);
        assert_eq!(a.class_counts(), vec![5; 4]);
        assert_eq!(a, gen_tiles(4, 5, 8, 0.1, 1).unwrap());
        assert!(a.inputs().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gen_tiles(4, 5, 10, 0.1, 1).is_err());
    }

    #[test]
    fn noiseless_tiles_follow_their_grating() {
        let ds = gen_tiles(3, 2, 8, 0.0, 3).unwrap();
        // A grating is constant along lines orthogonal to its direction; for
        // class 0 (orientation 0) every column value repeats down the rows.
        let img = ds.sample(0);
        for y in 1..8 {
            assert_eq!(&img[y * 8..y * 8 + 8], &img[..8]);
        }
    }

    #[test]
    fn subset_proportions() {
        let ds = gen_spirals(10, 10, 0.1, 0).unwrap();
        let s = stratified_subset(&ds, 0.2, 7).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s.class_counts(), vec![2; 10]);
        let full = stratified_subset(&ds, 1.0, 7).unwrap();
        let mut a: Vec<_> = full.inputs().chunks(2).map(|c| (c[0].to_bits(), c[1].to_bits())).collect();
        let mut b: Vec<_> = ds.inputs().chunks(2).map(|c| (c[0].to_bits(), c[1].to_bits())).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(matches!(stratified_subset(&ds, 0.01, 7), Err(Error::Data(_))));
    }

    #[test]
    fn batch_sizes() {
        let ds = gen_spirals(2, 5, 0.0, 0).unwrap();
        let b = batches(&ds, 3, 11).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        assert_eq!(b, batches(&ds, 3, 11).unwrap());
        let other = batches(&ds, 3, 12).unwrap();
        assert_ne!(b, other);
        let mut x: Vec<_> = other.concat();
        x.sort();
        assert_eq!(x, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_keeps_classes() {
        let ds = gen_spirals(3, 10, 0.1, 0).unwrap();
        let (t, v) = train_val_split(&ds, 0.2).unwrap();
        assert_eq!(t.class_counts(), vec![8; 3]);
        assert_eq!(v.class_counts(), vec![2; 3]);
        assert_eq!(v.split, Split::Val);
    }
}
