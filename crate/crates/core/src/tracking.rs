//! Keeps an [`EditMask`] index-aligned with its cloud through topology
//! changes.
//!
//! * clone: the copy is appended and inherits the parent's mask entry.
//! * split: the parent and its entry are removed; two children are appended,
//!   both inheriting the parent's entry.
//! * prune: the primitive and its entry are removed.
//!
//! Children always receive fresh ids from the cloud's monotone counter, so
//! ids are never reused and the op log can be replayed by id.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::{check_alignment, quat_to_matrix};
use crate::rng::{self, Rng};
use crate::scene::{quat_norm, GaussianCloud, GaussianPrimitive};
use crate::selector::EditMask;

/// World-space offset applied to a clone along its dominant axis.
pub const CLONE_NUDGE: f64 = 1e-4;
/// Children of a split have their scale divided by this factor.
pub const SPLIT_SCALE_FACTOR: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Clone,
    Split,
    Prune,
}

/// One topology change. Splits also record the seed their child positions
/// were drawn from, which makes replay exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op: OpKind,
    pub parent: Vec<u64>,
    pub children: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedCloud {
    pub cloud: GaussianCloud,
    pub mask: EditMask,
    pub op_log: Vec<OpRecord>,
}

fn dominant_axis(p: &GaussianPrimitive) -> Vector3<f64> {
    let n = quat_norm(&p.rotation);
    let q = p.rotation.map(|v| v / n);
    let r = quat_to_matrix(&q);
    let mut axis = 0;
    for k in 1..3 {
        if p.log_scale[k] > p.log_scale[axis] {
            axis = k;
        }
    }
    r.column(axis).into_owned()
}

impl TrackedCloud {
    pub fn new(cloud: GaussianCloud, mask: EditMask) -> Result<Self> {
        mask.validate()?;
        check_alignment(&cloud, &mask)?;
        Ok(TrackedCloud {
            cloud,
            mask,
            op_log: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index < self.cloud.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index,
                len: self.cloud.len(),
            })
        }
    }

    fn push_child(&mut self, child: GaussianPrimitive, logits: [f64; 2], label: bool) -> u64 {
        let id = self.cloud.push(child);
        self.mask.gaussian_ids.push(id);
        self.mask.logits.push(logits);
        self.mask.labels.push(label);
        id
    }

    fn remove_entry(&mut self, index: usize) -> Result<(GaussianPrimitive, [f64; 2], bool)> {
        let p = self.cloud.remove(index)?;
        self.mask.gaussian_ids.remove(index);
        let logits = self.mask.logits.remove(index);
        let label = self.mask.labels.remove(index);
        Ok((p, logits, label))
    }

    /// Duplicates primitive `index`; returns the clone's id.
    pub fn clone_op(&mut self, index: usize) -> Result<u64> {
        self.check_index(index)?;
        let parent = self.cloud.primitives()[index].clone();
        let mut child = parent.clone();
        let axis = dominant_axis(&parent);
        for k in 0..3 {
            child.position[k] += CLONE_NUDGE * axis[k];
        }
        let (logits, label) = (self.mask.logits[index], self.mask.labels[index]);
        let id = self.push_child(child, logits, label);
        self.op_log.push(OpRecord {
            op: OpKind::Clone,
            parent: vec![parent.id],
            children: vec![id],
            seed: None,
        });
        Ok(id)
    }

    /// Replaces primitive `index` by two smaller children sampled from it.
    pub fn split_op(&mut self, index: usize, rng: &mut Rng) -> Result<[u64; 2]> {
        self.check_index(index)?;
        let seed = rng.random::<u64>();
        self.split_with_seed(index, seed)
    }

    fn split_with_seed(&mut self, index: usize, seed: u64) -> Result<[u64; 2]> {
        let (parent, logits, label) = self.remove_entry(index)?;
        let n = quat_norm(&parent.rotation);
        let r = quat_to_matrix(&parent.rotation.map(|v| v / n));
        let scale = Vector3::from(parent.log_scale.map(f64::exp));
        let mut sampler = rng::seeded(seed);
        let shrink = SPLIT_SCALE_FACTOR.ln();
        let mut ids = [0; 2];
        for id in ids.iter_mut() {
            let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut sampler));
            let offset = r * scale.component_mul(&z);
            let mut child = parent.clone();
            for k in 0..3 {
                child.position[k] += offset[k];
                child.log_scale[k] -= shrink;
            }
            *id = self.push_child(child, logits, label);
        }
        self.op_log.push(OpRecord {
            op: OpKind::Split,
            parent: vec![parent.id],
            children: ids.to_vec(),
            seed: Some(seed),
        });
        Ok(ids)
    }

    pub fn prune_op(&mut self, index: usize) -> Result<()> {
        self.check_index(index)?;
        let (parent, _, _) = self.remove_entry(index)?;
        self.op_log.push(OpRecord {
            op: OpKind::Prune,
            parent: vec![parent.id],
            children: Vec::new(),
            seed: None,
        });
        Ok(())
    }

    /// Alignment of mask and cloud.
    pub fn check_invariants(&self) -> Result<()> {
        self.mask.validate()?;
        check_alignment(&self.cloud, &self.mask)
    }

    /// State without history, suitable as a replay starting point.
    pub fn checkpoint(&self) -> TrackedCloud {
        TrackedCloud {
            cloud: self.cloud.clone(),
            mask: self.mask.clone(),
            op_log: Vec::new(),
        }
    }

    /// Re-applies `log` on top of this state, checking that every child id
    /// matches what was recorded.
    pub fn replay(&mut self, log: &[OpRecord]) -> Result<()> {
        for (n, rec) in log.iter().enumerate() {
            let parent = *rec
                .parent
                .first()
                .ok_or_else(|| Error::ReplayMismatch(format!("entry {n} has no parent")))?;
            let index = self
                .cloud
                .index_of(parent)
                .ok_or_else(|| Error::ReplayMismatch(format!("entry {n}: parent {parent} not in cloud")))?;
            let children = match rec.op {
                OpKind::Clone => vec![self.clone_op(index)?],
                OpKind::Split => {
                    let seed = rec
                        .seed
                        .ok_or_else(|| Error::ReplayMismatch(format!("split entry {n} lacks a seed")))?;
                    self.split_with_seed(index, seed)?.to_vec()
                }
                OpKind::Prune => {
                    self.prune_op(index)?;
                    Vec::new()
                }
            };
            if children != rec.children {
                return Err(Error::ReplayMismatch(format!(
                    "entry {n}: produced children {children:?}, log says {:?}",
                    rec.children
                )));
            }
        }
        Ok(())
    }
}

pub fn write_op_log(path: &Path, log: &[OpRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in log {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_op_log(path: &Path) -> Result<Vec<OpRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
