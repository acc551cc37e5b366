//! Training matrices from stored snapshots.
//!
//! Label columns only ever grow. An edge gets a column once the corpus has
//! it at approach level above zero (hit, or a sibling of a hit edge); a
//! call-trace id gets one once any retained seed has produced it. Columns
//! are added in ascending id order within each refresh, so the layout is a
//! pure function of the corpus history.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::coverage::{ApproachLevel, CallTraceId, CoverageSnapshot, EdgeId};
use crate::mtnn::{pad_batch, MtnnError, TaskWeights, Task, TrainBatch};
use crate::scheduler::SeedRecord;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "LabelColumns", into = "LabelColumns")]
pub struct LabelSpace {
    edges: Vec<EdgeId>,
    edge_col: HashMap<EdgeId, usize>,
    ctx: Vec<CallTraceId>,
    ctx_col: HashMap<CallTraceId, usize>,
}

/// Serialized form: the column order alone.
#[derive(Clone, Serialize, Deserialize)]
struct LabelColumns {
    edges: Vec<EdgeId>,
    ctx: Vec<CallTraceId>,
}

impl From<LabelColumns> for LabelSpace {
    fn from(c: LabelColumns) -> Self {
        LabelSpace {
            edge_col: c.edges.iter().enumerate().map(|(i, &e)| (e, i)).collect(),
            ctx_col: c.ctx.iter().enumerate().map(|(i, &x)| (x, i)).collect(),
            edges: c.edges,
            ctx: c.ctx,
        }
    }
}

impl From<LabelSpace> for LabelColumns {
    fn from(s: LabelSpace) -> Self {
        LabelColumns {
            edges: s.edges,
            ctx: s.ctx,
        }
    }
}

/// How many snapshot rows were read to build each task's labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelReads {
    pub edge: u64,
    pub ctx: u64,
    pub approach: u64,
}

impl LabelSpace {
    /// Adds columns for anything in `global` not yet covered.
    pub fn refresh(&mut self, global: &CoverageSnapshot) {
        for (e, level) in global.approach.iter() {
            if level != ApproachLevel::Unreached && !self.edge_col.contains_key(&e) {
                self.edge_col.insert(e, self.edges.len());
                self.edges.push(e);
            }
        }
        for c in global.ctx.iter() {
            if !self.ctx_col.contains_key(&c) {
                self.ctx_col.insert(c, self.ctx.len());
                self.ctx.push(c);
            }
        }
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn ctx(&self) -> &[CallTraceId] {
        &self.ctx
    }

    /// Edge and approach head width; at least one column.
    pub fn n_edges(&self) -> usize {
        self.edges.len().max(1)
    }

    pub fn n_ctx(&self) -> usize {
        self.ctx.len().max(1)
    }

    /// Inputs plus labels for `records`. Tasks with zero weight get all-zero
    /// label matrices and their part of the snapshots is never looked at.
    pub fn build_batch(
        &self,
        records: &[&SeedRecord],
        n_in: usize,
        weights: &TaskWeights,
        beta_approach: f64,
        reads: &mut LabelReads,
    ) -> Result<TrainBatch<f32>, MtnnError> {
        let bytes: Vec<&[u8]> = records.iter().map(|r| r.input.bytes.as_slice()).collect();
        let inputs = pad_batch(&bytes, n_in)?;
        let rows = records.len();
        let mut edge_labels = Array2::zeros((rows, self.n_edges()));
        let mut ctx_labels = Array2::zeros((rows, self.n_ctx()));
        let mut approach_labels = Array2::zeros((rows, self.n_edges()));
        for (i, rec) in records.iter().enumerate() {
            let snap = &rec.snapshot;
            if weights.enabled(Task::Edge) {
                reads.edge += 1;
                for e in snap.edge.iter() {
                    if let Some(&c) = self.edge_col.get(&e) {
                        edge_labels[[i, c]] = 1.0;
                    }
                }
            }
            if weights.enabled(Task::Ctx) {
                reads.ctx += 1;
                for id in snap.ctx.iter() {
                    if let Some(&c) = self.ctx_col.get(&id) {
                        ctx_labels[[i, c]] = 1.0;
                    }
                }
            }
            if weights.enabled(Task::Approach) {
                reads.approach += 1;
                for (e, level) in snap.approach.iter() {
                    if let Some(&c) = self.edge_col.get(&e) {
                        approach_labels[[i, c]] = level.value(beta_approach) as f32;
                    }
                }
            }
        }
        Ok(TrainBatch {
            inputs,
            edge_labels,
            ctx_labels,
            approach_labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::Corpus;
    use crate::targets::{builtin, execute, TargetProgram, TestInput};

    fn corpus() -> Corpus {
        let t = builtin("ctx_demo").unwrap();
        let mut c = Corpus::new(t.registry_id());
        for b in [vec![1u8, 0], vec![0, 8], vec![5]] {
            let input = TestInput::new(0, b).unwrap();
            let snap = execute(&t, &input).unwrap();
            c.ingest(&input, snap, 0).unwrap();
        }
        c
    }

    #[test]
    fn labels_follow_snapshots() {
        let c = corpus();
        let mut space = LabelSpace::default();
        space.refresh(c.global());
        let recs: Vec<&SeedRecord> = c.seeds().collect();
        let mut reads = LabelReads::default();
        let b = space
            .build_batch(&recs, 16, &TaskWeights::default(), 0.5, &mut reads)
            .unwrap();
        assert_eq!(b.edge_labels.ncols(), space.n_edges());
        for (i, rec) in recs.iter().enumerate() {
            for (col, e) in space.edges().iter().enumerate() {
                let want = if rec.snapshot.edge.get(*e) { 1.0 } else { 0.0 };
                assert_eq!(b.edge_labels[[i, col]], want);
                let a = rec.snapshot.approach.get(*e).value(0.5) as f32;
                assert_eq!(b.approach_labels[[i, col]], a);
            }
        }
        assert_eq!(reads, LabelReads { edge: 3, ctx: 3, approach: 3 });
    }

    #[test]
    fn disabled_tasks_are_not_read() {
        let c = corpus();
        let mut space = LabelSpace::default();
        space.refresh(c.global());
        let recs: Vec<&SeedRecord> = c.seeds().collect();
        let mut reads = LabelReads::default();
        let w = TaskWeights { edge: 1.0, ctx: 0.0, approach: 0.0 };
        let b = space.build_batch(&recs, 16, &w, 0.5, &mut reads).unwrap();
        assert_eq!(reads, LabelReads { edge: 3, ctx: 0, approach: 0 });
        assert!(b.ctx_labels.iter().all(|&v| v == 0.0));
        assert!(b.approach_labels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn columns_serialize_in_order() {
        let c = corpus();
        let mut space = LabelSpace::default();
        space.refresh(c.global());
        let back: LabelSpace = serde_json::from_str(&serde_json::to_string(&space).unwrap()).unwrap();
        assert_eq!(back.edges(), space.edges());
        assert_eq!(back.ctx(), space.ctx());
    }

    #[test]
    fn columns_are_append_only() {
        let c = corpus();
        let mut space = LabelSpace::default();
        let first = c.seeds().next().unwrap().snapshot.clone();
        space.refresh(&first);
        let before = space.edges().to_vec();
        space.refresh(c.global());
        assert_eq!(&space.edges()[..before.len()], before.as_slice());
        assert!(space.ctx().len() >= 2);
    }
}
