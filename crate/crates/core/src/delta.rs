// SPDX-License-Identifier: MIT OR Apache-2.0

//! Delta parameters, drop masks and rescaling.
//!
//! Deltas are kept in `f64` so that `reconstruct(base, compute_delta(fine, base))`
//! returns `fine` bit-for-bit after rounding back to `f32`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::partition::{PartitionSet, MODEL_ID};
use crate::rng::CounterRng;
use crate::{DenseTensor, Error, Result, TensorMap};

/// `fine - base`, element-wise, in `f64`.
pub type DeltaMap = TensorMap<f64>;

pub fn compute_delta(fine: &TensorMap, base: &TensorMap) -> Result<DeltaMap> {
    fine.zip_map(base, |f, b| f as f64 - b as f64)
}

/// `base + delta`, rounded to `f32`.
pub fn reconstruct(base: &TensorMap, delta: &DeltaMap) -> Result<TensorMap> {
    base.zip_map(delta, |b, d| (b as f64 + d) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropMode {
    Random,
    Magnitude,
}

/// Drop ratios for mask construction.
#[derive(Debug, Clone, PartialEq)]
pub enum DropRatios {
    /// One ratio for the whole delta. Magnitude ranking is global.
    Global(f64),
    /// One ratio per partition id. Magnitude ranking is per partition.
    PerPartition(BTreeMap<String, f64>),
}

/// Which divisor `apply_mask_rescale` uses for survivors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rescale {
    /// `1 / (1 - ratio)` with the per-partition ratio recorded in the mask.
    Nominal,
    /// `1 / (1 - ratio)` with one ratio for every element.
    Global(f64),
    /// Survivors keep their value.
    Off,
}

/// Binary keep/drop arrays aligned with a delta map (`true` = drop).
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    drops: BTreeMap<String, Vec<bool>>,
    owners: BTreeMap<String, Vec<u32>>,
    partition_ids: Vec<String>,
    nominal: BTreeMap<String, f64>,
    seed: Option<u64>,
    mode: DropMode,
}

fn check_ratio(id: &str, r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::invalid(format!(
            "drop ratio for {id:?} is {r}; it must lie in [0, 1)"
        )));
    }
    Ok(())
}

/// Number of elements magnitude pruning drops from `n` at ratio `r`.
///
/// `floor(r * n)`, with a few ulps of slack so that e.g. 0.29 * 100 gives 29.
pub fn magnitude_drop_count(r: f64, n: usize) -> usize {
    let x = r * n as f64;
    let k = (x + x * 8.0 * f64::EPSILON).floor() as usize;
    k.min(n)
}

pub fn make_mask(
    delta: &DeltaMap,
    ratios: &DropRatios,
    partitions: &PartitionSet,
    mode: DropMode,
    seed: Option<u64>,
) -> Result<DropMask> {
    if mode == DropMode::Random && seed.is_none() {
        return Err(Error::invalid("random drop masks need a seed"));
    }
    let (owners, partition_ids, nominal) = match ratios {
        DropRatios::Global(r) => {
            check_ratio(MODEL_ID, *r)?;
            let owners = delta
                .iter()
                .map(|(n, t)| (n.to_string(), vec![0u32; t.len()]))
                .collect();
            let nominal = BTreeMap::from([(MODEL_ID.to_string(), *r)]);
            (owners, vec![MODEL_ID.to_string()], nominal)
        }
        DropRatios::PerPartition(map) => {
            for (id, &r) in map {
                if partitions.get(id).is_none() {
                    return Err(Error::invalid(format!("ratio given for unknown partition {id:?}")));
                }
                check_ratio(id, r)?;
            }
            if let Some(p) = partitions.iter().find(|p| !map.contains_key(&p.id)) {
                return Err(Error::invalid(format!("no drop ratio for partition {:?}", p.id)));
            }
            let owners = partitions.owner_table(delta)?;
            let ids = partitions.ids().map(str::to_string).collect();
            (owners, ids, map.clone())
        }
    };
    let per_index: Vec<f64> = partition_ids.iter().map(|id| nominal[id]).collect();

    let drops = match mode {
        DropMode::Random => {
            let root = CounterRng::new(seed.unwrap());
            let names: Vec<&str> = delta.names().collect();
            names
                .par_iter()
                .map(|&name| {
                    let rng = root.stream(name);
                    let own = &owners[name];
                    let d = own
                        .iter()
                        .enumerate()
                        .map(|(i, &o)| rng.uniform_at(i as u64) < per_index[o as usize])
                        .collect();
                    (name.to_string(), d)
                })
                .collect::<Vec<_>>()
                .into_iter()
                .collect()
        }
        DropMode::Magnitude => magnitude_drops(delta, &owners, &per_index),
    };

    Ok(DropMask {
        drops,
        owners,
        partition_ids,
        nominal,
        seed: if mode == DropMode::Random { seed } else { None },
        mode,
    })
}

fn magnitude_drops(
    delta: &DeltaMap,
    owners: &BTreeMap<String, Vec<u32>>,
    ratios: &[f64],
) -> BTreeMap<String, Vec<bool>> {
    let names: Vec<&str> = delta.names().collect();
    // (|delta|, tensor ordinal, flat index) per partition; tensor ordinal
    // follows name order, so sorting breaks ties by (name, index).
    let mut buckets: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); ratios.len()];
    for (ti, name) in names.iter().enumerate() {
        let t = delta.get(name).unwrap();
        for (i, (&v, &o)) in t.data().iter().zip(&owners[*name]).enumerate() {
            buckets[o as usize].push((v.abs(), ti, i));
        }
    }
    let mut drops: BTreeMap<String, Vec<bool>> = names
        .iter()
        .map(|n| (n.to_string(), vec![false; delta.get(n).unwrap().len()]))
        .collect();
    for (bucket, &r) in buckets.iter_mut().zip(ratios) {
        let k = magnitude_drop_count(r, bucket.len());
        bucket.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, ti, i) in &bucket[..k] {
            drops.get_mut(names[ti]).unwrap()[i] = true;
        }
    }
    drops
}

impl DropMask {
    pub fn mode(&self) -> DropMode {
        self.mode
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn nominal_ratios(&self) -> &BTreeMap<String, f64> {
        &self.nominal
    }

    pub fn drops(&self, tensor: &str) -> Option<&[bool]> {
        self.drops.get(tensor).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.drops.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn dropped_count(&self) -> usize {
        self.drops.values().flatten().filter(|&&d| d).count()
    }

    pub fn total(&self) -> usize {
        self.drops.values().map(Vec::len).sum()
    }

    /// Dropped count per partition id.
    pub fn dropped_by_partition(&self) -> BTreeMap<String, (usize, usize)> {
        let mut counts = vec![(0usize, 0usize); self.partition_ids.len()];
        for (name, d) in &self.drops {
            for (&drop, &o) in d.iter().zip(&self.owners[name]) {
                let c = &mut counts[o as usize];
                c.0 += drop as usize;
                c.1 += 1;
            }
        }
        self.partition_ids.iter().cloned().zip(counts).collect()
    }

    /// The mask as 0/1 values in `f64`.
    pub fn as_tensor_map(&self, like: &DeltaMap) -> Result<TensorMap<f64>> {
        self.check_aligned(like)?;
        Ok(like
            .iter()
            .map(|(n, t)| {
                let data = self.drops[n].iter().map(|&d| d as u8 as f64).collect();
                (n.to_string(), DenseTensor::new(t.shape().to_vec(), data).unwrap())
            })
            .collect())
    }

    pub fn check_aligned(&self, delta: &DeltaMap) -> Result<()> {
        if self.drops.len() != delta.len() {
            return Err(Error::Alignment("mask and delta have different tensor sets".into()));
        }
        for (name, t) in delta.iter() {
            match self.drops.get(name) {
                Some(d) if d.len() == t.len() => {}
                Some(_) => {
                    return Err(Error::Alignment(format!("mask for {name:?} has the wrong length")))
                }
                None => return Err(Error::Alignment(format!("mask lacks tensor {name:?}"))),
            }
        }
        Ok(())
    }
}

/// Zeroes dropped elements and divides survivors by `1 - ratio`, where ratio
/// is the nominal per-partition ratio stored in the mask.
pub fn apply_mask_rescale(delta: &DeltaMap, mask: &DropMask) -> Result<DeltaMap> {
    apply_mask(delta, mask, Rescale::Nominal)
}

pub fn apply_mask(delta: &DeltaMap, mask: &DropMask, rescale: Rescale) -> Result<DeltaMap> {
    mask.check_aligned(delta)?;
    let factors: Vec<f64> = match rescale {
        Rescale::Nominal => mask
            .partition_ids
            .iter()
            .map(|id| {
                let r = mask.nominal[id];
                check_ratio(id, r).map(|_| 1.0 / (1.0 - r))
            })
            .collect::<Result<_>>()?,
        Rescale::Global(r) => {
            check_ratio(MODEL_ID, r)?;
            vec![1.0 / (1.0 - r); mask.partition_ids.len()]
        }
        Rescale::Off => vec![1.0; mask.partition_ids.len()],
    };
    Ok(delta
        .iter()
        .map(|(name, t)| {
            let drops = &mask.drops[name];
            let owners = &mask.owners[name];
            let data = t
                .data()
                .iter()
                .zip(drops)
                .zip(owners)
                .map(|((&v, &d), &o)| if d { 0.0 } else { v * factors[o as usize] })
                .collect();
            (name.to_string(), DenseTensor::new(t.shape().to_vec(), data).unwrap())
        })
        .collect())
}
