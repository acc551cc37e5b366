//! Corpus bookkeeping and seed selection.
//!
//! Inputs are kept when they reach an edge (or, unless disabled, a call-trace
//! id) nobody has reached before. Per-edge hit counts give a rarity order,
//! and the training set for a round is the fresh new-edge seeds plus one
//! representative of each of the `T` rarest edges.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{diff_new, merge_into, CoverageSnapshot, EdgeId, NoveltyReport, RegistryId};
use crate::targets::TestInput;

pub const DEFAULT_RARE_EDGES: usize = 750;

#[derive(Debug, thiserror::Error)]
pub enum SchedulerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Meta { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Coverage(#[from] crate::coverage::CoverageError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SchedulerError + '_ {
    move |source| SchedulerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One line of `meta.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedMeta {
    pub id: u64,
    pub parent_id: Option<u64>,
    pub mutation_note: String,
    pub new_edges: usize,
    pub new_ctx: usize,
    pub retained_at_exec: u64,
}

#[derive(Debug, Clone)]
pub struct SeedRecord {
    pub input: TestInput,
    pub snapshot: CoverageSnapshot,
    pub meta: SeedMeta,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestOutcome {
    pub retained: bool,
    pub duplicate: bool,
    pub novelty: NoveltyReport,
    /// Id given to the input when it was retained.
    pub id: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    seeds: BTreeMap<u64, SeedRecord>,
    edge_hits: BTreeMap<EdgeId, usize>,
    global: CoverageSnapshot,
    known: HashSet<Vec<u8>>,
    /// Seeds kept for new edges since the last `start_round`.
    fresh: Vec<u64>,
    retain_on_ctx: bool,
    next_id: u64,
}

impl Corpus {
    pub fn new(registry: RegistryId) -> Self {
        Corpus {
            seeds: BTreeMap::new(),
            edge_hits: BTreeMap::new(),
            global: CoverageSnapshot::empty(registry),
            known: HashSet::new(),
            fresh: Vec::new(),
            retain_on_ctx: true,
            next_id: 0,
        }
    }

    /// Whether a new call-trace id alone is enough to keep an input.
    pub fn with_ctx_retention(mut self, on: bool) -> Self {
        self.retain_on_ctx = on;
        self
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn global(&self) -> &CoverageSnapshot {
        &self.global
    }

    pub fn edge_hits(&self) -> &BTreeMap<EdgeId, usize> {
        &self.edge_hits
    }

    pub fn get(&self, id: u64) -> Option<&SeedRecord> {
        self.seeds.get(&id)
    }

    pub fn seeds(&self) -> impl Iterator<Item = &SeedRecord> {
        self.seeds.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.seeds.keys().copied()
    }

    /// Seeds kept for new edges since the last [`Corpus::start_round`].
    pub fn fresh(&self) -> &[u64] {
        &self.fresh
    }

    pub fn start_round(&mut self) {
        self.fresh.clear();
    }

    pub fn is_known(&self, bytes: &[u8]) -> bool {
        self.known.contains(bytes)
    }

    pub fn ingest(
        &mut self,
        input: &TestInput,
        snap: CoverageSnapshot,
        retained_at_exec: u64,
    ) -> Result<IngestOutcome, SchedulerError> {
        if snap.registry != self.global.registry {
            return Err(crate::coverage::CoverageError::RegistryMismatch(
                self.global.registry.0,
                snap.registry.0,
            )
            .into());
        }
        if self.known.contains(&input.bytes) {
            return Ok(IngestOutcome {
                retained: false,
                duplicate: true,
                novelty: NoveltyReport::default(),
                id: None,
            });
        }
        let novelty = diff_new(&snap, &self.global);
        let keep = !novelty.new_edges.is_empty() || (self.retain_on_ctx && !novelty.new_ctx.is_empty());
        if !keep {
            return Ok(IngestOutcome {
                retained: false,
                duplicate: false,
                novelty,
                id: None,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        merge_into(&mut self.global, &snap)?;
        for e in snap.edge.iter() {
            *self.edge_hits.entry(e).or_insert(0) += 1;
        }
        if !novelty.new_edges.is_empty() {
            self.fresh.push(id);
        }
        self.known.insert(input.bytes.clone());
        let mut stored = input.clone();
        stored.id = id;
        let meta = SeedMeta {
            id,
            parent_id: input.parent_id,
            mutation_note: input.mutation_note.clone(),
            new_edges: novelty.new_edges.len(),
            new_ctx: novelty.new_ctx.len(),
            retained_at_exec,
        };
        self.seeds.insert(
            id,
            SeedRecord {
                input: stored,
                snapshot: snap,
                meta,
            },
        );
        Ok(IngestOutcome {
            retained: true,
            duplicate: false,
            novelty,
            id: Some(id),
        })
    }

    /// Puts back a seed read from disk under its recorded id, whatever its
    /// novelty against the current state.
    pub fn restore(&mut self, input: TestInput, snap: CoverageSnapshot, meta: SeedMeta) -> Result<(), SchedulerError> {
        merge_into(&mut self.global, &snap)?;
        for e in snap.edge.iter() {
            *self.edge_hits.entry(e).or_insert(0) += 1;
        }
        self.known.insert(input.bytes.clone());
        self.next_id = self.next_id.max(meta.id + 1);
        let mut input = input;
        input.id = meta.id;
        input.parent_id = meta.parent_id;
        input.mutation_note = meta.mutation_note.clone();
        self.seeds.insert(
            meta.id,
            SeedRecord {
                input,
                snapshot: snap,
                meta,
            },
        );
        Ok(())
    }

    /// Seen edges, rarest first; ties by ascending id.
    pub fn rarity_rank(&self) -> Vec<EdgeId> {
        let mut edges: Vec<(usize, EdgeId)> = self.edge_hits.iter().map(|(&e, &n)| (n, e)).collect();
        edges.sort();
        edges.into_iter().map(|(_, e)| e).collect()
    }

    /// Fresh new-edge seeds, then the lowest-id seed for each of the `t`
    /// rarest edges, without repeats, cut to `k`.
    pub fn select_training_set(&self, t: usize, k: usize) -> Vec<u64> {
        let mut out = Vec::new();
        let mut taken = BTreeSet::new();
        for &id in &self.fresh {
            if taken.insert(id) {
                out.push(id);
            }
        }
        let rare = self.rarity_rank();
        let rare: BTreeSet<EdgeId> = rare.into_iter().take(t).collect();
        // Lowest id per rare edge, then emit in rarity order.
        let mut rep: BTreeMap<EdgeId, u64> = BTreeMap::new();
        for (id, rec) in &self.seeds {
            for e in rec.snapshot.edge.iter().filter(|e| rare.contains(e)) {
                rep.entry(e).or_insert(*id);
            }
        }
        for e in self.rarity_rank().into_iter().take(t) {
            if let Some(&id) = rep.get(&e) {
                if taken.insert(id) {
                    out.push(id);
                }
            }
        }
        out.truncate(k);
        out
    }

    /// `k` distinct seeds drawn uniformly.
    pub fn select_random(&self, k: usize, rng: &mut impl Rng) -> Vec<u64> {
        let ids: Vec<u64> = self.ids().collect();
        ids.choose_multiple(rng, k.min(ids.len())).copied().collect()
    }

    /// Incremental counters recomputed from the stored snapshots.
    pub fn recount_edge_hits(&self) -> BTreeMap<EdgeId, usize> {
        let mut hits = BTreeMap::new();
        for rec in self.seeds.values() {
            for e in rec.snapshot.edge.iter() {
                *hits.entry(e).or_insert(0) += 1;
            }
        }
        hits
    }
}

/// On-disk corpus: `queue/id_%08d` byte files and `meta.jsonl`.
#[derive(Debug, Clone)]
pub struct CorpusDir {
    root: PathBuf,
}

impl CorpusDir {
    pub fn create(root: &Path) -> Result<Self, SchedulerError> {
        let q = root.join("queue");
        fs::create_dir_all(&q).map_err(io_err(&q))?;
        Ok(CorpusDir {
            root: root.to_path_buf(),
        })
    }

    pub fn queue_path(&self, id: u64) -> PathBuf {
        self.root.join("queue").join(format!("id_{id:08}"))
    }

    pub fn meta_path(&self) -> PathBuf {
        self.root.join("meta.jsonl")
    }

    pub fn append(&self, rec: &SeedRecord) -> Result<(), SchedulerError> {
        let q = self.queue_path(rec.meta.id);
        fs::write(&q, &rec.input.bytes).map_err(io_err(&q))?;
        let m = self.meta_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&m)
            .map_err(io_err(&m))?;
        let line = serde_json::to_string(&rec.meta).expect("plain struct");
        writeln!(f, "{line}").map_err(io_err(&m))?;
        Ok(())
    }

    /// Stored seeds in id order with their metadata. Lines whose byte file
    /// is missing (an interrupted write) are skipped.
    pub fn load(&self) -> Result<Vec<(SeedMeta, Vec<u8>)>, SchedulerError> {
        let m = self.meta_path();
        if !m.exists() {
            return Ok(Vec::new());
        }
        let f = File::open(&m).map_err(io_err(&m))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(&m))?;
            if line.trim().is_empty() {
                continue;
            }
            let meta: SeedMeta = match serde_json::from_str(&line) {
                Ok(meta) => meta,
                // A torn final line from an interrupted run.
                Err(_) if i > 0 => break,
                Err(e) => {
                    return Err(SchedulerError::Meta {
                        path: m.clone(),
                        line: i + 1,
                        msg: e.to_string(),
                    })
                }
            };
            match fs::read(self.queue_path(meta.id)) {
                Ok(bytes) => out.push((meta, bytes)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(io_err(&self.queue_path(meta.id))(e)),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::{CallTraceId, ExecStatus};
    use crate::targets::{builtin, execute, TargetProgram};
    use proptest::prelude::*;

    const REG: RegistryId = RegistryId(42);

    fn snap(edges: &[u32], ctx: &[u32]) -> CoverageSnapshot {
        let mut s = CoverageSnapshot::empty(REG);
        for &e in edges {
            s.edge.set(EdgeId(e));
        }
        for &c in ctx {
            s.ctx.set(CallTraceId(c));
        }
        s.exec_status = ExecStatus::Ok;
        s
    }

    fn input(b: &[u8]) -> TestInput {
        TestInput::new(0, b.to_vec()).unwrap()
    }

    #[test]
    fn retention_examples() {
        let mut c = Corpus::new(REG);
        assert!(c.ingest(&input(b"a"), snap(&[1], &[1]), 1).unwrap().retained);
        let sub = c.ingest(&input(b"b"), snap(&[1], &[1]), 2).unwrap();
        assert!(!sub.retained && !sub.duplicate);
        let dup = c.ingest(&input(b"a"), snap(&[9], &[]), 3).unwrap();
        assert!(dup.duplicate && !dup.retained);
        let ctx = c.ingest(&input(b"c"), snap(&[1], &[7]), 4).unwrap();
        assert!(ctx.retained);
        assert_eq!(ctx.novelty.new_ctx, vec![CallTraceId(7)]);

        let mut edges_only = Corpus::new(REG).with_ctx_retention(false);
        edges_only.ingest(&input(b"a"), snap(&[1], &[1]), 1).unwrap();
        assert!(!edges_only.ingest(&input(b"c"), snap(&[1], &[7]), 2).unwrap().retained);
    }

    #[test]
    fn ctx_demo_keeps_the_second_context() {
        let t = builtin("ctx_demo").unwrap();
        let mut c = Corpus::new(t.registry_id());
        let a = input(&[1, 0]);
        let b = input(&[0, 8]);
        assert!(c.ingest(&a, execute(&t, &a).unwrap(), 1).unwrap().retained);
        let out = c.ingest(&b, execute(&t, &b).unwrap(), 2).unwrap();
        assert!(out.retained);
        assert!(out.novelty.new_edges.is_empty());
        assert!(!out.novelty.new_ctx.is_empty());
    }

    #[test]
    fn rarity_examples() {
        let mut c = Corpus::new(REG);
        // hits: a=10 three times, b=20 once, c=30 twice
        c.ingest(&input(b"1"), snap(&[10, 20, 30], &[]), 0).unwrap();
        c.ingest(&input(b"2"), snap(&[10, 30, 40], &[]), 0).unwrap();
        c.ingest(&input(b"3"), snap(&[10, 40, 50], &[]), 0).unwrap();
        assert_eq!(
            c.rarity_rank(),
            vec![EdgeId(20), EdgeId(50), EdgeId(30), EdgeId(40), EdgeId(10)]
        );
        let mut flat = Corpus::new(REG);
        flat.ingest(&input(b"1"), snap(&[5, 2, 9], &[]), 0).unwrap();
        assert_eq!(flat.rarity_rank(), vec![EdgeId(2), EdgeId(5), EdgeId(9)]);
    }

    #[test]
    fn selection_examples() {
        let mut one = Corpus::new(REG);
        one.ingest(&input(b"x"), snap(&[1], &[]), 0).unwrap();
        assert_eq!(one.select_training_set(750, 750), vec![0]);

        // s0 has a, s1 has b; c is common to many seeds.
        let mut c = Corpus::new(REG);
        c.ingest(&input(b"s0"), snap(&[1, 3], &[]), 0).unwrap();
        c.ingest(&input(b"s1"), snap(&[2, 3], &[]), 0).unwrap();
        for i in 0..3u8 {
            c.ingest(&input(&[b'z', i]), snap(&[3, 100 + i as u32], &[]), 0).unwrap();
        }
        c.start_round();
        // Edges 1, 2 and 100..102 all have one hit; T = 2 picks ids 1 and 2.
        assert_eq!(c.select_training_set(2, 750), vec![0, 1]);
        // Fresh seeds come first and survive the cut.
        c.ingest(&input(b"new"), snap(&[77], &[]), 0).unwrap();
        assert_eq!(c.select_training_set(2, 2), vec![5, 0]);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = CorpusDir::create(dir.path()).unwrap();
        let mut c = Corpus::new(REG);
        let mut child = input(b"kid");
        child.parent_id = Some(0);
        child.mutation_note = "enum:0=41".into();
        c.ingest(&input(b"root"), snap(&[1], &[]), 3).unwrap();
        c.ingest(&child, snap(&[2], &[]), 9).unwrap();
        for rec in c.seeds() {
            store.append(rec).unwrap();
        }
        let back = store.load().unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, c.get(1).unwrap().meta);
        assert_eq!(back[1].1, b"kid");
        assert!(store.queue_path(1).ends_with("queue/id_00000001"));
    }

    #[test]
    fn torn_meta_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let store = CorpusDir::create(dir.path()).unwrap();
        let mut c = Corpus::new(REG);
        c.ingest(&input(b"root"), snap(&[1], &[]), 3).unwrap();
        store.append(c.get(0).unwrap()).unwrap();
        let mut f = OpenOptions::new().append(true).open(store.meta_path()).unwrap();
        write!(f, "{{\"id\":1,\"par").unwrap();
        assert_eq!(store.load().unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn counters_match_recount_and_new_edges_are_kept(
            stream in prop::collection::vec(prop::collection::btree_set(0u32..40, 0..6), 1..40)
        ) {
            let mut c = Corpus::new(REG);
            let mut seen: BTreeSet<u32> = BTreeSet::new();
            let mut prev_global = 0;
            for (i, edges) in stream.iter().enumerate() {
                let e: Vec<u32> = edges.iter().copied().collect();
                let has_new = e.iter().any(|x| !seen.contains(x));
                let out = c.ingest(&input(&(i as u32).to_le_bytes()), snap(&e, &[]), i as u64).unwrap();
                prop_assert_eq!(out.retained, has_new);
                seen.extend(e);
                prop_assert!(c.global().edge.len() >= prev_global);
                prev_global = c.global().edge.len();
            }
            prop_assert_eq!(c.recount_edge_hits(), c.edge_hits().clone());
        }

        #[test]
        fn every_rare_edge_is_represented(
            stream in prop::collection::vec(prop::collection::btree_set(0u32..30, 1..5), 1..30),
            t in 1usize..20,
        ) {
            let mut c = Corpus::new(REG);
            for (i, edges) in stream.iter().enumerate() {
                let e: Vec<u32> = edges.iter().copied().collect();
                c.ingest(&input(&(i as u32).to_le_bytes()), snap(&e, &[]), 0).unwrap();
            }
            c.start_round();
            let sel = c.select_training_set(t, usize::MAX);
            let a = c.select_training_set(t, usize::MAX);
            prop_assert_eq!(&sel, &a);
            for e in c.rarity_rank().into_iter().take(t) {
                prop_assert!(sel.iter().any(|id| c.get(*id).unwrap().snapshot.edge.get(e)));
            }
        }
    }
}
