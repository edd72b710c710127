// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter partitions at model, layer and hidden-state granularity.
//!
//! A [`PartitionSchema`] groups tensors by glob patterns. Resolving it against
//! a [`TensorMap`] yields disjoint [`Partition`]s that jointly cover every
//! matched tensor:
//!
//! - `model`: one partition holding every tensor; groups are ignored.
//! - `layer`: one partition per group, each holding whole tensors.
//! - `hidden`: one partition per (group, index) where index runs along each
//!   tensor's slice axis (default 0). Hidden unit `h` owns output row `h` of
//!   every weight in the group and element `h` of its bias.
//!
//! Unmatched tensors are a schema error unless the residual policy is
//! `implicit-residual-group`, in which case they form a single residual
//! partition that is never corrupted and keeps the base drop ratio.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Deref;
use std::path::Path;

use glob::Pattern;
use serde::{Deserialize, Serialize};

use crate::tensor::strides;
use crate::{Element, Error, Result, TensorMap};

pub const RESIDUAL_ID: &str = "__residual__";
pub const MODEL_ID: &str = "model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Model,
    Layer,
    Hidden,
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(Level::Model),
            "layer" => Ok(Level::Layer),
            "hidden" => Ok(Level::Hidden),
            other => Err(Error::invalid(format!(
                "unknown level {other:?} (expected model, layer or hidden)"
            ))),
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Model => "model",
            Level::Layer => "layer",
            Level::Hidden => "hidden",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualPolicy {
    #[default]
    Error,
    ImplicitResidualGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: String,
    pub patterns: Vec<String>,
    /// Slice axis for hidden-level expansion, keyed by tensor name or pattern.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub axes: BTreeMap<String, usize>,
}

impl GroupSpec {
    pub fn new(id: impl Into<String>, patterns: &[&str]) -> Self {
        Self {
            id: id.into(),
            patterns: patterns.iter().map(|p| p.to_string()).collect(),
            axes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSchema {
    pub level: Level,
    #[serde(default)]
    pub groups: Vec<GroupSpec>,
    #[serde(default)]
    pub residual: ResidualPolicy,
}

impl PartitionSchema {
    pub fn model() -> Self {
        Self {
            level: Level::Model,
            groups: Vec::new(),
            residual: ResidualPolicy::Error,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_toml(path)
    }

    pub fn with_level(&self, level: Level) -> Self {
        Self {
            level,
            ..self.clone()
        }
    }
}

/// A hyper-rectangular slice of one tensor: one half-open range per axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub tensor: String,
    pub ranges: Vec<(usize, usize)>,
}

impl Member {
    pub fn whole(tensor: &str, shape: &[usize]) -> Self {
        Self {
            tensor: tensor.to_string(),
            ranges: shape.iter().map(|&d| (0, d)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|(a, b)| b - a).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_bounds(&self, shape: &[usize]) -> Result<()> {
        let ok = self.ranges.len() == shape.len()
            && self
                .ranges
                .iter()
                .zip(shape)
                .all(|(&(a, b), &d)| a <= b && b <= d);
        if ok {
            Ok(())
        } else {
            Err(Error::Schema(format!(
                "slice {:?} of tensor {:?} is outside shape {shape:?}",
                self.ranges, self.tensor
            )))
        }
    }

    /// Row-major flat indices of the slice, in ascending order.
    pub fn flat_indices(&self, shape: &[usize]) -> Vec<usize> {
        let n = self.len();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return out;
        }
        let st = strides(shape);
        let mut idx: Vec<usize> = self.ranges.iter().map(|r| r.0).collect();
        loop {
            out.push(idx.iter().zip(&st).map(|(i, s)| i * s).sum());
            let mut axis = idx.len();
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < self.ranges[axis].1 {
                    break;
                }
                idx[axis] = self.ranges[axis].0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub id: String,
    pub members: Vec<Member>,
    pub element_count: usize,
    /// Residual partitions are never corrupted and always get importance 0.
    #[serde(default)]
    pub residual: bool,
}

impl Partition {
    pub fn new(id: impl Into<String>, members: Vec<Member>) -> Self {
        let element_count = members.iter().map(Member::len).sum();
        Self {
            id: id.into(),
            members,
            element_count,
            residual: false,
        }
    }

    pub fn empty(id: impl Into<String>) -> Self {
        Self::new(id, Vec::new())
    }

    /// The single partition covering every tensor in `map`.
    pub fn whole_model<E: Element>(map: &TensorMap<E>) -> Self {
        Self::new(
            MODEL_ID,
            map.iter().map(|(n, t)| Member::whole(n, t.shape())).collect(),
        )
    }

    pub fn check_bounds<E: Element>(&self, map: &TensorMap<E>) -> Result<()> {
        for m in &self.members {
            let t = map.get(&m.tensor).ok_or_else(|| {
                Error::Schema(format!(
                    "partition {:?} references missing tensor {:?}",
                    self.id, m.tensor
                ))
            })?;
            m.check_bounds(t.shape())?;
        }
        Ok(())
    }
}

/// Result of resolving a schema: partitions plus the level they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSet {
    pub level: Level,
    pub partitions: Vec<Partition>,
}

impl Deref for PartitionSet {
    type Target = [Partition];
    fn deref(&self) -> &[Partition] {
        &self.partitions
    }
}

impl PartitionSet {
    pub fn model<E: Element>(map: &TensorMap<E>) -> Self {
        Self {
            level: Level::Model,
            partitions: vec![Partition::whole_model(map)],
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.partitions.iter().map(|p| p.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Partition> {
        self.partitions.iter().find(|p| p.id == id)
    }

    /// For every tensor, the index of the partition owning each element.
    ///
    /// Fails unless the partitions are in bounds, pairwise disjoint and cover
    /// every element of `map`.
    pub fn owner_table<E: Element>(&self, map: &TensorMap<E>) -> Result<BTreeMap<String, Vec<u32>>> {
        const UNOWNED: u32 = u32::MAX;
        let mut table: BTreeMap<String, Vec<u32>> = map
            .iter()
            .map(|(n, t)| (n.to_string(), vec![UNOWNED; t.len()]))
            .collect();
        for (pi, p) in self.partitions.iter().enumerate() {
            p.check_bounds(map)?;
            for m in &p.members {
                let shape = map.require(&m.tensor)?.shape();
                let owners = table.get_mut(&m.tensor).expect("checked above");
                for i in m.flat_indices(shape) {
                    if owners[i] != UNOWNED {
                        return Err(Error::Schema(format!(
                            "element {i} of {:?} is claimed by both {:?} and {:?}",
                            m.tensor, self.partitions[owners[i] as usize].id, p.id
                        )));
                    }
                    owners[i] = pi as u32;
                }
            }
        }
        for (name, owners) in &table {
            if let Some(i) = owners.iter().position(|&o| o == UNOWNED) {
                return Err(Error::Schema(format!(
                    "element {i} of {name:?} is not covered by any partition"
                )));
            }
        }
        Ok(table)
    }
}

/// Resolves `schema` against the tensors of `map`.
pub fn build_partitions<E: Element>(map: &TensorMap<E>, schema: &PartitionSchema) -> Result<PartitionSet> {
    if schema.level == Level::Model {
        return Ok(PartitionSet::model(map));
    }

    let mut seen_ids = BTreeSet::new();
    let mut compiled = Vec::with_capacity(schema.groups.len());
    for g in &schema.groups {
        if !seen_ids.insert(g.id.as_str()) || g.id == RESIDUAL_ID {
            return Err(Error::Schema(format!("group id {:?} is duplicated or reserved", g.id)));
        }
        let pats = g
            .patterns
            .iter()
            .map(|p| {
                Pattern::new(p)
                    .map(|c| (p.as_str(), c))
                    .map_err(|e| Error::Schema(format!("group {:?} pattern {p:?}: {e}", g.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        compiled.push((g, pats));
    }

    // tensor -> (group index, matched pattern)
    let mut assigned: Vec<Vec<(&str, &str)>> = vec![Vec::new(); compiled.len()];
    let mut residual = Vec::new();
    for name in map.names() {
        let mut hit: Option<(usize, &str)> = None;
        for (gi, (g, pats)) in compiled.iter().enumerate() {
            if let Some((p, _)) = pats.iter().find(|(_, c)| c.matches(name)) {
                if let Some((prev, _)) = hit {
                    return Err(Error::Schema(format!(
                        "tensor {name:?} matches both group {:?} and group {:?}",
                        compiled[prev].0.id, g.id
                    )));
                }
                hit = Some((gi, p));
            }
        }
        match hit {
            Some((gi, p)) => assigned[gi].push((name, p)),
            None => match schema.residual {
                ResidualPolicy::Error => {
                    return Err(Error::Schema(format!(
                        "tensor {name:?} is not matched by any group"
                    )))
                }
                ResidualPolicy::ImplicitResidualGroup => residual.push(name),
            },
        }
    }

    let mut partitions = Vec::new();
    for ((g, _), tensors) in compiled.iter().zip(&assigned) {
        if tensors.is_empty() {
            return Err(Error::Schema(format!("group {:?} matches no tensor", g.id)));
        }
        match schema.level {
            Level::Layer => {
                let members = tensors
                    .iter()
                    .map(|(n, _)| Member::whole(n, map.get(n).unwrap().shape()))
                    .collect();
                partitions.push(Partition::new(g.id.clone(), members));
            }
            Level::Hidden => partitions.extend(hidden_partitions(map, g, tensors)?),
            Level::Model => unreachable!(),
        }
    }
    if !residual.is_empty() {
        let members = residual
            .iter()
            .map(|n| Member::whole(n, map.get(n).unwrap().shape()))
            .collect();
        let mut p = Partition::new(RESIDUAL_ID, members);
        p.residual = true;
        partitions.push(p);
    }
    Ok(PartitionSet {
        level: schema.level,
        partitions,
    })
}

fn hidden_partitions<E: Element>(
    map: &TensorMap<E>,
    group: &GroupSpec,
    tensors: &[(&str, &str)],
) -> Result<Vec<Partition>> {
    let mut axes = Vec::with_capacity(tensors.len());
    let mut units: Option<usize> = None;
    for &(name, pattern) in tensors {
        let shape = map.get(name).unwrap().shape();
        let axis = group
            .axes
            .get(name)
            .or_else(|| group.axes.get(pattern))
            .copied()
            .unwrap_or(0);
        if axis >= shape.len() {
            return Err(Error::Schema(format!(
                "slice axis {axis} is out of range for tensor {name:?} with shape {shape:?}"
            )));
        }
        match units {
            None => units = Some(shape[axis]),
            Some(u) if u != shape[axis] => {
                return Err(Error::Schema(format!(
                    "group {:?}: tensor {name:?} has {} hidden units on axis {axis}, expected {u}",
                    group.id, shape[axis]
                )))
            }
            Some(_) => {}
        }
        axes.push(axis);
    }
    let units = units.unwrap_or(0);
    Ok((0..units)
        .map(|h| {
            let members = tensors
                .iter()
                .zip(&axes)
                .map(|(&(name, _), &axis)| {
                    let shape = map.get(name).unwrap().shape();
                    let ranges = shape
                        .iter()
                        .enumerate()
                        .map(|(a, &d)| if a == axis { (h, h + 1) } else { (0, d) })
                        .collect();
                    Member {
                        tensor: name.to_string(),
                        ranges,
                    }
                })
                .collect();
            Partition::new(format!("{}.{h}", group.id), members)
        })
        .collect())
}

/// Copy of `fine` with the slices of `partition` taken from `base`.
pub fn substitute<E: Element>(
    fine: &TensorMap<E>,
    base: &TensorMap<E>,
    partition: &Partition,
) -> Result<TensorMap<E>> {
    fine.check_aligned(base)?;
    partition.check_bounds(fine)?;
    let mut out = fine.clone();
    for m in &partition.members {
        let src = base.require(&m.tensor)?;
        let shape = src.shape().to_vec();
        let dst = out.get_mut(&m.tensor).unwrap().data_mut();
        for i in m.flat_indices(&shape) {
            dst[i] = src.data()[i];
        }
    }
    Ok(out)
}
