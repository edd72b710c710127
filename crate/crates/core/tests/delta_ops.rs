// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use apl_core::delta::{
    apply_mask_rescale, compute_delta, magnitude_drop_count, make_mask, reconstruct, DeltaMap, DropMode, DropRatios,
};
use apl_core::partition::{build_partitions, Level, PartitionSet};
use apl_core::rng::{CounterRng, Stream};
use apl_core::toy::ToyNetSpec;
use apl_core::{DenseTensor, TensorMap};
use proptest::prelude::*;

fn vector(name: &str, data: Vec<f64>) -> DeltaMap {
    let mut m = DeltaMap::new();
    m.insert(name, DenseTensor::new(vec![data.len()], data).unwrap()).unwrap();
    m
}

#[test]
fn rescaled_output_is_unbiased_elementwise() {
    let lam = 0.7;
    let seeds = 1000u64;
    let rng = CounterRng::new(3).stream("d");
    let data: Vec<f64> = (0..1000).map(|i| 0.5 + rng.normal_at(i)).collect();
    let delta = vector("w", data.clone());
    let parts = PartitionSet::model(&delta);
    let mut sum = vec![0.0; data.len()];
    for seed in 0..seeds {
        let mask = make_mask(&delta, &DropRatios::Global(lam), &parts, DropMode::Random, Some(seed)).unwrap();
        let out = apply_mask_rescale(&delta, &mask).unwrap();
        for (s, v) in sum.iter_mut().zip(out.get("w").unwrap().data()) {
            *s += v;
        }
    }
    // mean of `seeds` draws of d * B / (1 - lam): sd = |d| sqrt(lam / (1 - lam) / seeds)
    let mut worst = 0.0f64;
    for (s, d) in sum.iter().zip(&data) {
        let sd = d.abs() * (lam / (1.0 - lam) / seeds as f64).sqrt();
        worst = worst.max((s / seeds as f64 - d).abs() / sd);
    }
    assert!(worst <= 4.0, "worst |z| {worst}");
}

#[test]
fn masks_ignore_thread_count() {
    let spec = ToyNetSpec::new(6, vec![40, 40], 3, 5).unwrap();
    let delta = spec.init();
    let parts = build_partitions(&delta, &spec.schema(Level::Hidden)).unwrap();
    let ratios: BTreeMap<String, f64> = parts.ids().enumerate().map(|(i, id)| (id.to_string(), 0.1 + 0.01 * i as f64)).collect();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            make_mask(&delta, &DropRatios::PerPartition(ratios.clone()), &parts, DropMode::Random, Some(99)).unwrap()
        })
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(3));
}

#[test]
fn random_drop_counts_are_binomial() {
    let spec = ToyNetSpec::new(30, vec![50], 4, 2).unwrap();
    let delta = spec.init();
    let parts = build_partitions(&delta, &spec.schema(Level::Layer)).unwrap();
    let ratios = BTreeMap::from([("layer1".to_string(), 0.3), ("layer2".to_string(), 0.8)]);
    let mask = make_mask(&delta, &DropRatios::PerPartition(ratios.clone()), &parts, DropMode::Random, Some(4)).unwrap();
    for (id, (dropped, n)) in mask.dropped_by_partition() {
        let p = ratios[&id];
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((dropped as f64 - n as f64 * p).abs() <= 4.0 * sd, "{id}: {dropped} of {n}");
    }
}

#[test]
fn magnitude_counts_are_exact_per_partition() {
    let spec = ToyNetSpec::new(7, vec![9], 3, 8).unwrap();
    let delta = spec.init();
    let parts = build_partitions(&delta, &spec.schema(Level::Layer)).unwrap();
    let ratios = BTreeMap::from([("layer1".to_string(), 0.35), ("layer2".to_string(), 0.9)]);
    let mask = make_mask(&delta, &DropRatios::PerPartition(ratios.clone()), &parts, DropMode::Magnitude, None).unwrap();
    for (id, (dropped, n)) in mask.dropped_by_partition() {
        assert_eq!(dropped, (ratios[&id] * n as f64).floor() as usize, "{id}");
        assert_eq!(dropped, magnitude_drop_count(ratios[&id], n));
    }
}

proptest! {
    #[test]
    fn magnitude_keeps_the_largest(data in prop::collection::vec(-10.0f64..10.0, 1..200), ratio in 0.0f64..0.99) {
        let delta = vector("w", data.clone());
        let parts = PartitionSet::model(&delta);
        let mask = make_mask(&delta, &DropRatios::Global(ratio), &parts, DropMode::Magnitude, None).unwrap();
        let drops = mask.drops("w").unwrap();
        for i in 0..data.len() {
            for j in 0..data.len() {
                if data[i].abs() > data[j].abs() && !drops[j] {
                    prop_assert!(!drops[i], "kept |{}| but dropped |{}|", data[j], data[i]);
                }
            }
        }
        prop_assert_eq!(drops.iter().filter(|&&d| d).count(), (ratio * data.len() as f64).floor() as usize);
    }

    #[test]
    // f64 holds the difference of two f32 values exactly when their
    // exponents lie within a few dozen binades of each other.
    fn reconstruct_inverts_delta(pairs in prop::collection::vec(((-(1i32 << 24)..(1 << 24)), -12i32..12, (-(1i32 << 24)..(1 << 24)), -12i32..12), 1..64)) {
        let val = |m: i32, e: i32| (m as f64 * 2f64.powi(e)) as f32;
        let fine: Vec<f32> = pairs.iter().map(|p| val(p.0, p.1)).collect();
        let base: Vec<f32> = pairs.iter().map(|p| val(p.2, p.3)).collect();
        let mk = |d: Vec<f32>| {
            let mut m = TensorMap::new();
            m.insert("w", DenseTensor::new(vec![d.len()], d).unwrap()).unwrap();
            m
        };
        let (fine, base) = (mk(fine), mk(base));
        let back = reconstruct(&base, &compute_delta(&fine, &base).unwrap()).unwrap();
        let b: Vec<u32> = back.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        let f: Vec<u32> = fine.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(b, f);
    }
}

#[test]
fn seed_changes_the_mask() {
    let mut s = Stream::new(CounterRng::new(1));
    let delta = vector("w", (0..500).map(|_| s.normal()).collect());
    let parts = PartitionSet::model(&delta);
    let a = make_mask(&delta, &DropRatios::Global(0.5), &parts, DropMode::Random, Some(1)).unwrap();
    let b = make_mask(&delta, &DropRatios::Global(0.5), &parts, DropMode::Random, Some(2)).unwrap();
    assert_ne!(a, b);
}
