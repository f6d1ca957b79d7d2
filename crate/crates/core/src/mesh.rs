//! Device mesh, uniform layer sharding and in-memory collectives.
//!
//! Workers are numbered row-major: worker `(i, j)` has id `i·N + j`. Row `i`
//! is model sync group `i` (the `N` workers holding shard `i`), column `j`
//! is model shard group `j` (the `M` workers that together hold one full
//! replica). Reductions use a fixed pairwise tree in rank-ascending order.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::Vector;

pub type WorkerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceMesh {
    /// M: number of sync groups (rows); also the shard count per layer.
    pub rows: usize,
    /// N: number of shard groups (columns); also the sync group size.
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    /// Model sync group: one mesh row.
    SyncRow,
    /// Model shard group: one mesh column.
    ShardCol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupId {
    pub kind: GroupKind,
    pub index: usize,
}

impl GroupId {
    pub fn row(index: usize) -> Self {
        Self {
            kind: GroupKind::SyncRow,
            index,
        }
    }

    pub fn col(index: usize) -> Self {
        Self {
            kind: GroupKind::ShardCol,
            index,
        }
    }
}

impl DeviceMesh {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!("mesh dims must be >= 1, got {rows}x{cols}")));
        }
        Ok(Self { rows, cols })
    }

    pub fn workers(&self) -> usize {
        self.rows * self.cols
    }

    pub fn coord(&self, worker: WorkerId) -> (usize, usize) {
        (worker / self.cols, worker % self.cols)
    }

    pub fn worker_at(&self, row: usize, col: usize) -> WorkerId {
        row * self.cols + col
    }

    pub fn sync_group_of(&self, worker: WorkerId) -> GroupId {
        GroupId::row(self.coord(worker).0)
    }

    pub fn shard_group_of(&self, worker: WorkerId) -> GroupId {
        GroupId::col(self.coord(worker).1)
    }

    /// Members in rank order.
    pub fn members(&self, group: GroupId) -> Result<Vec<WorkerId>> {
        match group.kind {
            GroupKind::SyncRow if group.index < self.rows => {
                Ok((0..self.cols).map(|j| self.worker_at(group.index, j)).collect())
            }
            GroupKind::ShardCol if group.index < self.cols => {
                Ok((0..self.rows).map(|i| self.worker_at(i, group.index)).collect())
            }
            _ => Err(Error::Protocol(format!("group {group:?} out of range for {}x{} mesh", self.rows, self.cols))),
        }
    }

    pub fn group_size(&self, kind: GroupKind) -> usize {
        match kind {
            GroupKind::SyncRow => self.cols,
            GroupKind::ShardCol => self.rows,
        }
    }
}

pub fn mesh_build(rows: usize, cols: usize) -> Result<DeviceMesh> {
    DeviceMesh::new(rows, cols)
}

/// Uniform shard layout of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShardSpec {
    pub param_count: usize,
    pub shards: usize,
    pub shard_len: usize,
    pub pad: usize,
}

impl LayerShardSpec {
    pub fn new(param_count: usize, shards: usize) -> Self {
        let shards = shards.max(1);
        let shard_len = param_count.div_ceil(shards);
        Self {
            param_count,
            shards,
            shard_len,
            pad: shard_len * shards - param_count,
        }
    }

    pub fn range(&self, rank: usize) -> std::ops::Range<usize> {
        rank * self.shard_len..(rank + 1) * self.shard_len
    }

    /// Splits the full layer into contiguous equal shards, zero-padding the tail.
    pub fn shard(&self, layer: &Vector) -> Result<Vec<Vector>> {
        check_len("shard_layer", self.param_count, layer.len())?;
        let mut padded = layer.as_slice().to_vec();
        padded.resize(self.shard_len * self.shards, 0.0);
        Ok((0..self.shards)
            .map(|r| Vector::from_vec(padded[self.range(r)].to_vec()))
            .collect())
    }

    /// Concatenates shards in rank order and strips the pad.
    pub fn unshard(&self, shards: &[&Vector]) -> Result<Vector> {
        check_len("unshard shards", self.shards, shards.len())?;
        let mut full = Vec::with_capacity(self.shard_len * self.shards);
        for s in shards {
            check_len("unshard shard_len", self.shard_len, s.len())?;
            full.extend_from_slice(s.as_slice());
        }
        full.truncate(self.param_count);
        Ok(Vector::from_vec(full))
    }
}

/// Shards one layer over `shards` ranks; returns the pieces and the layout.
pub fn shard_layer(layer: &Vector, shards: usize) -> Result<(Vec<Vector>, LayerShardSpec)> {
    let spec = LayerShardSpec::new(layer.len(), shards);
    Ok((spec.shard(layer)?, spec))
}

/// Sorts `(worker, value)` pairs into rank order, checking that each group
/// member appears exactly once.
fn by_rank<'a, T: ?Sized>(mesh: &DeviceMesh, group: GroupId, inputs: &[(WorkerId, &'a T)]) -> Result<Vec<&'a T>> {
    let members = mesh.members(group)?;
    if inputs.len() != members.len() {
        return Err(Error::Protocol(format!(
            "{group:?} expects {} members, got {}",
            members.len(),
            inputs.len()
        )));
    }
    members
        .iter()
        .map(|m| {
            let mut found = inputs.iter().filter(|(w, _)| w == m);
            match (found.next(), found.next()) {
                (Some((_, v)), None) => Ok(*v),
                (None, _) => Err(Error::Protocol(format!("worker {m} missing from {group:?}"))),
                (Some(_), Some(_)) => Err(Error::Protocol(format!("worker {m} duplicated in {group:?}"))),
            }
        })
        .collect()
}

fn tree_split(len: usize) -> usize {
    len.next_power_of_two() / 2
}

/// Element-wise sum over a pairwise tree in rank-ascending order:
/// `((x0 + x1) + (x2 + x3)) + x4` for five inputs.
pub fn tree_sum(xs: &[&[f64]]) -> Vec<f64> {
    match xs.len() {
        0 => Vec::new(),
        1 => xs[0].to_vec(),
        n => {
            let mid = tree_split(n);
            let mut left = tree_sum(&xs[..mid]);
            let right = tree_sum(&xs[mid..]);
            left.iter_mut().zip(&right).for_each(|(a, b)| *a += b);
            left
        }
    }
}

pub fn tree_sum_scalar(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let mid = tree_split(n);
            tree_sum_scalar(&xs[..mid]) + tree_sum_scalar(&xs[mid..])
        }
    }
}

fn equal_lengths(op: &'static str, xs: &[&Vector]) -> Result<usize> {
    let len = xs.first().map_or(0, |x| x.len());
    for x in xs {
        check_len(op, len, x.len())?;
    }
    Ok(len)
}

fn tree_mean(op: &'static str, xs: &[&Vector]) -> Result<Vector> {
    equal_lengths(op, xs)?;
    let slices: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let k = xs.len() as f64;
    let mut sum = tree_sum(&slices);
    sum.iter_mut().for_each(|s| *s /= k);
    Ok(Vector::from_vec(sum))
}

/// All-gather of equal-length shards. Every member observes the returned
/// full vector; `spec` strips the pad.
pub fn all_gather(mesh: &DeviceMesh, group: GroupId, shards: &[(WorkerId, &Vector)], spec: &LayerShardSpec) -> Result<Vector> {
    let ordered = by_rank(mesh, group, shards)?;
    spec.unshard(&ordered)
}

/// Mean over members, then member `r` (rank order) receives shard `r`.
pub fn reduce_scatter_mean(mesh: &DeviceMesh, group: GroupId, full: &[(WorkerId, &Vector)], spec: &LayerShardSpec) -> Result<Vec<Vector>> {
    let ordered = by_rank(mesh, group, full)?;
    check_len("reduce_scatter shards", spec.shards, ordered.len())?;
    let mean = tree_mean("reduce_scatter_mean", &ordered)?;
    spec.shard(&mean)
}

/// Mean over members; every member observes the returned vector.
pub fn all_reduce_mean(mesh: &DeviceMesh, group: GroupId, xs: &[(WorkerId, &Vector)]) -> Result<Vector> {
    let ordered = by_rank(mesh, group, xs)?;
    tree_mean("all_reduce_mean", &ordered)
}

/// Weighted sum `Σ w_j x_j` over members. Members with weight exactly zero
/// are left out of the tree, so their (possibly non-finite) data never
/// touches the result.
pub fn weighted_all_reduce(mesh: &DeviceMesh, group: GroupId, xs: &[(WorkerId, &Vector)], weights: &[f64]) -> Result<Vector> {
    let ordered = by_rank(mesh, group, xs)?;
    check_len("weighted_all_reduce weights", ordered.len(), weights.len())?;
    let len = equal_lengths("weighted_all_reduce", &ordered)?;
    let scaled: Vec<Vec<f64>> = ordered
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|(x, &w)| x.iter().map(|v| w * v).collect())
        .collect();
    if scaled.is_empty() {
        return Ok(Vector::zeros(len));
    }
    let slices: Vec<&[f64]> = scaled.iter().map(|v| v.as_slice()).collect();
    Ok(Vector::from_vec(tree_sum(&slices)))
}

/// Scalar sum over members; every member observes the returned value.
pub fn scalar_sum(mesh: &DeviceMesh, group: GroupId, values: &[(WorkerId, f64)]) -> Result<f64> {
    let refs: Vec<(WorkerId, &f64)> = values.iter().map(|(w, v)| (*w, v)).collect();
    let ordered: Vec<f64> = by_rank(mesh, group, &refs)?.into_iter().copied().collect();
    Ok(tree_sum_scalar(&ordered))
}
