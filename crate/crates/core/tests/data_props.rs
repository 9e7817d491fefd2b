use std::collections::BTreeMap;

use proptest::prelude::*;

use stablekd::data::{batches, gen_spirals, gen_tiles, skd1, stratified_subset};
use stablekd::instrument::{fluctuation_score, DistanceTrace};
use stablekd::{Dataset, Split};

/// Multiset of samples keyed by their exact bits and label.
fn multiset(ds: &Dataset) -> BTreeMap<(Vec<u32>, usize), usize> {
    let mut m = BTreeMap::new();
    for (i, &y) in ds.labels().iter().enumerate() {
        let key = (ds.sample(i).iter().map(|v| v.to_bits()).collect(), y);
        *m.entry(key).or_insert(0) += 1;
    }
    m
}

fn contained(small: &Dataset, large: &Dataset) -> bool {
    let big = multiset(large);
    multiset(small).iter().all(|(k, n)| big.get(k).is_some_and(|m| m >= n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generators_and_samplers_are_pure_in_their_seed(
        classes in 2usize..6,
        per_class in 4usize..40,
        seed in any::<u64>(),
        fraction in 0.3f64..1.0,
        batch in 1usize..50,
    ) {
        let s = gen_spirals(classes, per_class, 0.05, seed).unwrap();
        prop_assert_eq!(&s, &gen_spirals(classes, per_class, 0.05, seed).unwrap());
        let t = gen_tiles(classes, per_class, 8, 0.1, seed).unwrap();
        prop_assert_eq!(&t, &gen_tiles(classes, per_class, 8, 0.1, seed).unwrap());
        let sub = stratified_subset(&s, fraction, seed).unwrap();
        prop_assert_eq!(&sub, &stratified_subset(&s, fraction, seed).unwrap());
        prop_assert_eq!(batches(&s, batch, seed).unwrap(), batches(&s, batch, seed).unwrap());
    }

    #[test]
    fn stratified_subsets_are_proportional_and_nested(
        counts in prop::collection::vec(3usize..40, 2..5),
        seed in any::<u64>(),
        a in 0.3f64..1.0,
        b in 0.3f64..1.0,
    ) {
        let per_class = *counts.iter().max().unwrap();
        let full = gen_spirals(counts.len(), per_class, 0.05, seed).unwrap();
        // Unbalanced classes: keep the first `counts[c]` rows of class c.
        let mut seen = vec![0; counts.len()];
        let rows: Vec<usize> = (0..full.len())
            .filter(|&i| {
                let y = full.labels()[i];
                seen[y] += 1;
                seen[y] <= counts[y]
            })
            .collect();
        let ds = full.select(&rows);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = stratified_subset(&ds, lo, seed).unwrap();
        let large = stratified_subset(&ds, hi, seed).unwrap();
        for (sub, f) in [(&small, lo), (&large, hi)] {
            for (c, &n) in sub.class_counts().iter().enumerate() {
                prop_assert!((n as f64 - counts[c] as f64 * f).abs() <= 1.0, "class {} has {} of {}", c, n, counts[c]);
            }
        }
        prop_assert!(contained(&small, &large));
        prop_assert!(contained(&large, &ds));
    }

    #[test]
    fn skd1_round_trip_is_byte_stable(classes in 2usize..5, per_class in 1usize..8, side in prop::sample::select(vec![8usize, 16]), seed in any::<u64>()) {
        let ds = gen_tiles(classes, per_class, side, 0.2, seed).unwrap();
        let bytes = skd1::encode(&ds).unwrap();
        let back = skd1::decode(&bytes, Split::Train).unwrap();
        prop_assert_eq!(skd1::encode(&back).unwrap(), bytes);
        prop_assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn batches_partition_the_dataset(per_class in 1usize..60, batch in 1usize..70, seed in any::<u64>()) {
        let ds = gen_spirals(2, per_class, 0.0, 3).unwrap();
        let bs = batches(&ds, batch, seed).unwrap();
        prop_assert!(bs[..bs.len() - 1].iter().all(|b| b.len() == batch));
        prop_assert!(bs.last().unwrap().len() <= batch);
        let mut all: Vec<usize> = bs.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn distance_trace_accumulates(ds in prop::collection::vec(0.0f64..10.0, 0..200), cut in 0usize..250) {
        let mut trace = DistanceTrace::new(Vec::new());
        for &d in &ds {
            trace.push(d);
        }
        let mut sum = 0.0;
        for (i, &d) in ds.iter().enumerate() {
            sum += d;
            prop_assert!(trace.distances[i] >= 0.0);
            prop_assert!((trace.cumulative[i] - sum).abs() <= 1e-9 * sum.max(1.0));
        }
        let prefix: f64 = ds[..cut.min(ds.len())].iter().sum();
        prop_assert!((trace.cumulative_at(cut) - prefix).abs() <= 1e-9 * prefix.max(1.0));
        prop_assert!(trace.cumulative.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn fluctuation_ignores_an_increasing_tail(
        acc in prop::collection::vec(0.0f64..1.0, 1..30),
        steps in prop::collection::vec(0.001f64..0.1, 0..10),
    ) {
        let base = fluctuation_score(&acc);
        prop_assert!(base >= 0.0);
        let mut longer = acc.clone();
        let mut last = *acc.last().unwrap();
        for s in steps {
            last += s;
            longer.push(last);
        }
        prop_assert_eq!(fluctuation_score(&longer), base);
    }
}
