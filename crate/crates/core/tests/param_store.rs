// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use apl_core::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use apl_core::partition::{build_partitions, substitute, Level, Partition, PartitionSet};
use apl_core::toy::ToyNetSpec;
use apl_core::{DenseTensor, TensorMap};
use proptest::prelude::*;

fn arb_map() -> impl Strategy<Value = TensorMap> {
    let tensor = prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        (Just(shape), prop::collection::vec(any::<u32>(), n))
    });
    prop::collection::btree_map("[a-z]{1,5}(\\.[a-z]{1,4})?", tensor, 0..5).prop_map(|m| {
        let mut map = TensorMap::new();
        for (name, (shape, bits)) in m {
            let data = bits.into_iter().map(f32::from_bits).collect();
            map.insert(name, DenseTensor::new(shape, data).unwrap()).unwrap();
        }
        map
    })
}

fn bits(m: &TensorMap) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    m.iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn arb_spec() -> impl Strategy<Value = ToyNetSpec> {
    (1usize..5, prop::collection::vec(1usize..6, 0..3), 2usize..4, any::<u64>())
        .prop_map(|(i, h, c, s)| ToyNetSpec::new(i, h, c, s).unwrap())
}

/// Every flat index of every tensor, owned by exactly one partition.
fn check_cover(map: &TensorMap<f64>, parts: &PartitionSet) {
    let mut seen = BTreeSet::new();
    let mut counted = 0;
    for p in parts.iter() {
        counted += p.element_count;
        let mut own = 0;
        for m in &p.members {
            let shape = map.get(&m.tensor).unwrap().shape();
            for i in m.flat_indices(shape) {
                assert!(seen.insert((m.tensor.clone(), i)), "{} overlaps at {}[{i}]", p.id, m.tensor);
                own += 1;
            }
        }
        assert_eq!(own, p.element_count, "{}", p.id);
    }
    assert_eq!(counted, map.total_elements());
    assert_eq!(seen.len(), map.total_elements());
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_exact(map in arb_map()) {
        let bytes = to_bytes(&map);
        let back = from_bytes(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&map));
        prop_assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn partitions_cover_every_level(spec in arb_spec()) {
        let net = spec.init();
        for level in [Level::Model, Level::Layer, Level::Hidden] {
            let parts = build_partitions(&net, &spec.schema(level)).unwrap();
            check_cover(&net, &parts);
        }
        let hidden = build_partitions(&net, &spec.schema(Level::Hidden)).unwrap();
        let units: usize = spec.layer_dims().iter().map(|&(out, _)| out).sum();
        prop_assert_eq!(hidden.len(), units);
    }

    #[test]
    fn substitute_is_an_involution(spec in arb_spec(), shift in -3.0f32..3.0, pick in any::<prop::sample::Index>()) {
        let base: TensorMap = spec.init().cast();
        let fine = base.map(|v| v + shift);
        let parts = build_partitions(&base, &spec.schema(Level::Hidden)).unwrap();
        let p = &parts[pick.index(parts.len())];
        let swapped = substitute(&fine, &base, p).unwrap();
        let back = substitute(&swapped, &fine, p).unwrap();
        prop_assert_eq!(bits(&back), bits(&fine));
        prop_assert_eq!(bits(&substitute(&fine, &fine, p).unwrap()), bits(&fine));
    }
}

#[test]
fn file_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut map = TensorMap::new();
    map.insert("w", DenseTensor::new(vec![2], vec![1.0f32, -2.5]).unwrap()).unwrap();
    let (a, b) = (dir.path().join("a.safetensors"), dir.path().join("b.safetensors"));
    save_checkpoint(&map, &a).unwrap();
    save_checkpoint(&map, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(bits(&load_checkpoint(&a).unwrap()), bits(&map));
}

#[test]
fn layer_substitution_mixes_checkpoints() {
    let spec = ToyNetSpec::new(3, vec![4], 2, 1).unwrap();
    let base: TensorMap = spec.init().cast();
    let fine = base.map(|v| v + 1.0);
    let parts = build_partitions(&base, &spec.schema(Level::Layer)).unwrap();
    assert_eq!(parts.ids().collect::<Vec<_>>(), ["layer1", "layer2"]);
    let out = substitute(&fine, &base, parts.get("layer1").unwrap()).unwrap();
    for (name, t) in out.iter() {
        let want = if name.starts_with("layer1") { &base } else { &fine };
        assert_eq!(t, want.get(name).unwrap(), "{name}");
    }
    assert_eq!(substitute(&fine, &base, &Partition::whole_model(&base)).unwrap(), base);
    assert_eq!(substitute(&fine, &base, &Partition::empty("none")).unwrap(), fine);
}
