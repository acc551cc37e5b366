//! Coverage metrics: edge, approach-level and call-context bitmaps.
//!
//! Three signals are recorded per execution:
//!
//! * the edge bitmap, one bit per control-flow edge,
//! * the approach bitmap, which also marks the untaken sibling of every taken
//!   branch with an intermediate level,
//! * the call-trace bitmap, where every edge is tagged with an XOR hash of the
//!   active call stack.
//!
//! Bitmaps are sparse: an absent key means 0. Snapshots are plain values and
//! can be merged into a global accumulator by whoever owns it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::targets::{BugId, CmpObservation};

/// Default value given to an edge whose sibling branch was taken.
pub const DEFAULT_BETA_APPROACH: f64 = 0.5;

/// Bitmap size used by the hashed (subprocess) edge-id convention.
pub const HASHED_BITMAP_SIZE: u32 = 1 << 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CoverageError {
    #[error("edge registry overflow: more than {max} distinct edges")]
    RegistryOverflow { max: usize },
    #[error("snapshots come from different registries ({0:#x} vs {1:#x})")]
    RegistryMismatch(u64, u64),
}

macro_rules! id_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(
    /// A basic block of a target.
    BlockId
);
id_newtype!(
    /// Index of an edge in the edge and approach bitmaps.
    EdgeId
);
id_newtype!(
    /// Identifier of one call instruction.
    CallSiteId
);
id_newtype!(
    /// XOR fold of the call sites on the active stack.
    StackHash
);
id_newtype!(
    /// Context-sensitive edge id, `stack_hash ^ edge_id`.
    CallTraceId
);

/// Identity of a block/edge registry. Snapshots can only be merged when they
/// were produced against the same registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegistryId(pub u64);

impl RegistryId {
    pub fn for_name(name: &str) -> Self {
        RegistryId(fnv1a64(name.as_bytes()))
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
enum RegistryMode {
    Dense {
        ids: HashMap<(BlockId, BlockId), EdgeId>,
        max_edges: usize,
    },
    Hashed {
        bitmap_size: u32,
    },
}

/// Maps `(prev_block, cur_block)` pairs to edge ids.
///
/// Dense mode hands out sequential ids on first sight of a pair and is exact
/// (no collisions). Hashed mode follows the AFL convention
/// `((prev >> 1) ^ cur) % bitmap_size` and needs no state.
#[derive(Debug, Clone)]
pub struct EdgeRegistry {
    id: RegistryId,
    mode: RegistryMode,
}

impl EdgeRegistry {
    pub fn dense(id: RegistryId, max_edges: usize) -> Self {
        EdgeRegistry {
            id,
            mode: RegistryMode::Dense {
                ids: HashMap::new(),
                max_edges,
            },
        }
    }

    pub fn hashed(id: RegistryId, bitmap_size: u32) -> Self {
        assert!(bitmap_size > 0, "bitmap size must be positive");
        EdgeRegistry {
            id,
            mode: RegistryMode::Hashed { bitmap_size },
        }
    }

    pub fn id(&self) -> RegistryId {
        self.id
    }

    pub fn is_hashed(&self) -> bool {
        matches!(self.mode, RegistryMode::Hashed { .. })
    }

    /// Number of allocated ids (dense) or the bitmap size (hashed).
    pub fn len(&self) -> usize {
        match &self.mode {
            RegistryMode::Dense { ids, .. } => ids.len(),
            RegistryMode::Hashed { bitmap_size } => *bitmap_size as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edge_id(&mut self, prev: BlockId, cur: BlockId) -> Result<EdgeId, CoverageError> {
        match &mut self.mode {
            RegistryMode::Dense { ids, max_edges } => {
                if let Some(&e) = ids.get(&(prev, cur)) {
                    return Ok(e);
                }
                if ids.len() >= *max_edges {
                    return Err(CoverageError::RegistryOverflow { max: *max_edges });
                }
                let e = EdgeId(ids.len() as u32);
                ids.insert((prev, cur), e);
                Ok(e)
            }
            RegistryMode::Hashed { bitmap_size } => {
                Ok(EdgeId(((prev.0 >> 1) ^ cur.0) % *bitmap_size))
            }
        }
    }

    /// Read-only lookup; dense mode returns `None` for unseen pairs.
    pub fn lookup(&self, prev: BlockId, cur: BlockId) -> Option<EdgeId> {
        match &self.mode {
            RegistryMode::Dense { ids, .. } => ids.get(&(prev, cur)).copied(),
            RegistryMode::Hashed { bitmap_size } => {
                Some(EdgeId(((prev.0 >> 1) ^ cur.0) % *bitmap_size))
            }
        }
    }
}

/// XOR fold of all call sites on the stack. Permutation invariant, and pairs
/// of identical entries cancel out.
pub fn call_stack_hash(stack: &[CallSiteId]) -> StackHash {
    StackHash(stack.iter().fold(0, |acc, c| acc ^ c.0))
}

pub fn call_trace_id(stack_hash: StackHash, eid: EdgeId) -> CallTraceId {
    CallTraceId(stack_hash.0 ^ eid.0)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeBitmap {
    bits: BTreeSet<EdgeId>,
}

impl EdgeBitmap {
    pub fn set(&mut self, e: EdgeId) -> bool {
        self.bits.insert(e)
    }

    pub fn get(&self, e: EdgeId) -> bool {
        self.bits.contains(&e)
    }

    pub fn iter(&self) -> impl Iterator<Item = EdgeId> + '_ {
        self.bits.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl FromIterator<EdgeId> for EdgeBitmap {
    fn from_iter<I: IntoIterator<Item = EdgeId>>(iter: I) -> Self {
        EdgeBitmap {
            bits: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTraceBitmap {
    bits: BTreeSet<CallTraceId>,
}

impl CallTraceBitmap {
    pub fn set(&mut self, c: CallTraceId) -> bool {
        self.bits.insert(c)
    }

    pub fn get(&self, c: CallTraceId) -> bool {
        self.bits.contains(&c)
    }

    pub fn iter(&self) -> impl Iterator<Item = CallTraceId> + '_ {
        self.bits.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl FromIterator<CallTraceId> for CallTraceBitmap {
    fn from_iter<I: IntoIterator<Item = CallTraceId>>(iter: I) -> Self {
        CallTraceBitmap {
            bits: iter.into_iter().collect(),
        }
    }
}

/// Three-level approach value. The intermediate level is worth β (0.5 by
/// default) when turned into a training label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ApproachLevel {
    Unreached,
    Approached,
    Hit,
}

impl ApproachLevel {
    pub fn value(self, beta: f64) -> f64 {
        match self {
            ApproachLevel::Unreached => 0.0,
            ApproachLevel::Approached => beta,
            ApproachLevel::Hit => 1.0,
        }
    }

    pub fn percent(self) -> u8 {
        match self {
            ApproachLevel::Unreached => 0,
            ApproachLevel::Approached => 50,
            ApproachLevel::Hit => 100,
        }
    }

    pub fn from_percent(p: u8) -> Option<Self> {
        match p {
            0 => Some(ApproachLevel::Unreached),
            50 => Some(ApproachLevel::Approached),
            100 => Some(ApproachLevel::Hit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApproachBitmap {
    levels: BTreeMap<EdgeId, ApproachLevel>,
}

impl ApproachBitmap {
    pub fn get(&self, e: EdgeId) -> ApproachLevel {
        self.levels
            .get(&e)
            .copied()
            .unwrap_or(ApproachLevel::Unreached)
    }

    /// Raises the level of `e` to at least `level`.
    pub fn raise(&mut self, e: EdgeId, level: ApproachLevel) {
        if level == ApproachLevel::Unreached {
            return;
        }
        let slot = self.levels.entry(e).or_insert(level);
        if *slot < level {
            *slot = level;
        }
    }

    /// Records a branch event: the taken child becomes 1, its sibling at
    /// least β. Ancestors further up the graph are left alone.
    pub fn update(&mut self, taken: EdgeId, sibling: EdgeId) {
        debug_assert_ne!(taken, sibling);
        self.raise(taken, ApproachLevel::Hit);
        self.raise(sibling, ApproachLevel::Approached);
    }

    /// Non-zero entries in ascending edge order.
    pub fn iter(&self) -> impl Iterator<Item = (EdgeId, ApproachLevel)> + '_ {
        self.levels.iter().map(|(e, l)| (*e, *l))
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub fn approach_update(mut bm: ApproachBitmap, taken: EdgeId, sibling: EdgeId) -> ApproachBitmap {
    bm.update(taken, sibling);
    bm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    Timeout,
    Crash,
}

impl ExecStatus {
    pub fn is_fault(self) -> bool {
        self != ExecStatus::Ok
    }
}

/// Everything one execution recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageSnapshot {
    pub registry: RegistryId,
    pub edge: EdgeBitmap,
    pub ctx: CallTraceBitmap,
    pub approach: ApproachBitmap,
    pub cmp_log: Vec<CmpObservation>,
    pub bugs: Vec<BugId>,
    pub exec_status: ExecStatus,
}

impl CoverageSnapshot {
    pub fn empty(registry: RegistryId) -> Self {
        CoverageSnapshot {
            registry,
            edge: EdgeBitmap::default(),
            ctx: CallTraceBitmap::default(),
            approach: ApproachBitmap::default(),
            cmp_log: Vec::new(),
            bugs: Vec::new(),
            exec_status: ExecStatus::Ok,
        }
    }

    pub fn has_coverage(&self) -> bool {
        !self.edge.is_empty() || !self.ctx.is_empty()
    }

    /// True when every hit edge is also at approach level 1.
    pub fn is_consistent(&self) -> bool {
        self.edge
            .iter()
            .all(|e| self.approach.get(e) == ApproachLevel::Hit)
    }
}

/// Pointwise OR/max of the bitmaps; logs are concatenated without duplicates.
pub fn merge(
    a: &CoverageSnapshot,
    b: &CoverageSnapshot,
) -> Result<CoverageSnapshot, CoverageError> {
    let mut out = a.clone();
    merge_into(&mut out, b)?;
    Ok(out)
}

pub fn merge_into(acc: &mut CoverageSnapshot, b: &CoverageSnapshot) -> Result<(), CoverageError> {
    if acc.registry != b.registry {
        return Err(CoverageError::RegistryMismatch(acc.registry.0, b.registry.0));
    }
    for e in b.edge.iter() {
        acc.edge.set(e);
    }
    for c in b.ctx.iter() {
        acc.ctx.set(c);
    }
    for (e, l) in b.approach.iter() {
        acc.approach.raise(e, l);
    }
    for c in &b.cmp_log {
        if !acc.cmp_log.contains(c) {
            acc.cmp_log.push(c.clone());
        }
    }
    for bug in &b.bugs {
        if !acc.bugs.contains(bug) {
            acc.bugs.push(bug.clone());
        }
    }
    acc.exec_status = acc.exec_status.max(b.exec_status);
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoveltyReport {
    pub new_edges: Vec<EdgeId>,
    pub new_ctx: Vec<CallTraceId>,
}

impl NoveltyReport {
    pub fn is_empty(&self) -> bool {
        self.new_edges.is_empty() && self.new_ctx.is_empty()
    }
}

/// Edges and call traces set in `snap` but not in `global`.
pub fn diff_new(snap: &CoverageSnapshot, global: &CoverageSnapshot) -> NoveltyReport {
    NoveltyReport {
        new_edges: snap.edge.iter().filter(|e| !global.edge.get(*e)).collect(),
        new_ctx: snap.ctx.iter().filter(|c| !global.ctx.get(*c)).collect(),
    }
}

/// A two-way branch point in a target's static control-flow graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branch {
    pub on_true: EdgeId,
    pub on_false: EdgeId,
}

/// Builds a target's static graph: every edge is registered up front so that
/// execution only ever reads the registry.
#[derive(Debug)]
pub struct GraphBuilder {
    name: String,
    registry: EdgeRegistry,
    next_block: u32,
    labels: BTreeMap<String, EdgeId>,
}

impl GraphBuilder {
    pub fn new(name: &str, max_edges: usize) -> Self {
        GraphBuilder {
            name: name.to_string(),
            registry: EdgeRegistry::dense(RegistryId::for_name(name), max_edges),
            next_block: 0,
            labels: BTreeMap::new(),
        }
    }

    fn block(&mut self) -> BlockId {
        let b = BlockId(self.next_block);
        self.next_block += 1;
        b
    }

    fn label(&mut self, label: String, e: EdgeId) {
        let prev = self.labels.insert(label.clone(), e);
        assert!(prev.is_none(), "duplicate edge label {label}");
    }

    /// A straight-line edge (function entry, prologue block).
    pub fn edge(&mut self, label: &str) -> Result<EdgeId, CoverageError> {
        let (p, c) = (self.block(), self.block());
        let e = self.registry.edge_id(p, c)?;
        self.label(label.to_string(), e);
        Ok(e)
    }

    /// A conditional with its two outgoing edges, labelled `label:T` and
    /// `label:F`.
    pub fn branch(&mut self, label: &str) -> Result<Branch, CoverageError> {
        let (s, t, f) = (self.block(), self.block(), self.block());
        let on_true = self.registry.edge_id(s, t)?;
        let on_false = self.registry.edge_id(s, f)?;
        self.label(format!("{label}:T"), on_true);
        self.label(format!("{label}:F"), on_false);
        Ok(Branch { on_true, on_false })
    }

    /// Call-site ids are spread over the whole 32-bit space so that XOR with
    /// small dense edge ids stays distinct.
    pub fn call_site(&self, label: &str) -> CallSiteId {
        let h = fnv1a64(format!("{}::{}", self.name, label).as_bytes());
        CallSiteId(((h >> 32) as u32 ^ h as u32) | 0x8000_0000)
    }

    pub fn finish(self) -> StaticGraph {
        StaticGraph {
            name: self.name,
            registry: self.registry,
            labels: self.labels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StaticGraph {
    name: String,
    registry: EdgeRegistry,
    labels: BTreeMap<String, EdgeId>,
}

impl StaticGraph {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn registry(&self) -> &EdgeRegistry {
        &self.registry
    }

    pub fn edge_named(&self, label: &str) -> Option<EdgeId> {
        self.labels.get(label).copied()
    }

    pub fn edge_count(&self) -> usize {
        self.registry.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = (&str, EdgeId)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Instrumentation hooks used by in-process targets while they run.
#[derive(Debug)]
pub struct Tracer<'g> {
    graph: &'g StaticGraph,
    stack: Vec<CallSiteId>,
    stack_hash: StackHash,
    snap: CoverageSnapshot,
    contexts: BTreeSet<(StackHash, EdgeId)>,
    cmp_count: usize,
}

impl<'g> Tracer<'g> {
    pub fn new(graph: &'g StaticGraph) -> Self {
        Tracer {
            graph,
            stack: Vec::new(),
            stack_hash: StackHash(0),
            snap: CoverageSnapshot::empty(graph.registry.id()),
            contexts: BTreeSet::new(),
            cmp_count: 0,
        }
    }

    pub fn target_name(&self) -> &str {
        self.graph.name()
    }

    /// Marks a straight-line edge as executed.
    pub fn hit(&mut self, e: EdgeId) {
        self.snap.edge.set(e);
        self.snap.approach.raise(e, ApproachLevel::Hit);
        self.snap.ctx.set(call_trace_id(self.stack_hash, e));
        if self.stack_hash.0 != 0 {
            self.contexts.insert((self.stack_hash, e));
        }
    }

    pub fn branch(&mut self, br: Branch, cond: bool) -> bool {
        let (taken, sibling) = if cond {
            (br.on_true, br.on_false)
        } else {
            (br.on_false, br.on_true)
        };
        self.hit(taken);
        self.snap.approach.update(taken, sibling);
        cond
    }

    /// Equality comparison instrumented like a CMP instruction: operands of
    /// width 2, 4 or 8 are logged before the branch is taken.
    pub fn cmp_eq(&mut self, br: Branch, lhs: &[u8], rhs: &[u8], lhs_is_constant: bool) -> bool {
        debug_assert_eq!(lhs.len(), rhs.len());
        if let Some(obs) = CmpObservation::new(lhs, rhs, lhs_is_constant) {
            self.snap.cmp_log.push(obs);
            self.cmp_count += 1;
        }
        self.branch(br, lhs == rhs)
    }

    pub fn call<R>(&mut self, site: CallSiteId, f: impl FnOnce(&mut Self) -> R) -> R {
        self.stack.push(site);
        self.stack_hash = StackHash(self.stack_hash.0 ^ site.0);
        let r = f(self);
        let popped = self.stack.pop();
        debug_assert_eq!(popped, Some(site));
        self.stack_hash = StackHash(self.stack_hash.0 ^ site.0);
        r
    }

    pub fn stack_hash(&self) -> StackHash {
        self.stack_hash
    }

    pub fn bug(&mut self, label: &str) {
        let id = BugId::new(self.graph.name(), label);
        if !self.snap.bugs.contains(&id) {
            self.snap.bugs.push(id);
        }
    }

    /// Distinct `(stack_hash, edge)` pairs seen under a non-empty stack.
    pub fn contexts(&self) -> &BTreeSet<(StackHash, EdgeId)> {
        &self.contexts
    }

    pub fn finish(self, status: ExecStatus) -> CoverageSnapshot {
        let mut snap = self.snap;
        snap.exec_status = status;
        snap
    }

    /// Like [`Tracer::finish`] but also returns the observed call contexts.
    pub fn finish_with_contexts(
        self,
        status: ExecStatus,
    ) -> (CoverageSnapshot, BTreeSet<(StackHash, EdgeId)>) {
        let mut snap = self.snap;
        snap.exec_status = status;
        (snap, self.contexts)
    }
}
