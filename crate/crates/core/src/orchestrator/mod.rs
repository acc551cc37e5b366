//! The fuzzing loop: select seeds, retrain, rank bytes, mutate, execute,
//! keep what is new, repeat.
//!
//! A [`Fuzzer`] owns the corpus, the model and the out dir. Target runs fan
//! out to `workers` scoped threads, and results come back in submission
//! order, so with a deterministic target the run is reproducible for a fixed
//! `rng_seed`. The reproducibility guarantee is only stated for one worker,
//! since a subprocess target may not be deterministic under load.

pub mod config;
mod labels;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageError, CoverageSnapshot, ExecStatus};
use crate::mtnn::{
    build_model, import_embedding, load_embedding, load_model, pad_input, saliency_nodes, save_model,
    train, ArchSpec, EmbeddingBundle, LossKind, ModelParams, MtnnError, TrainConfig,
};
use crate::mutator::{random_flips, random_input, round_robin, top_k, MutationPlan};
use crate::scheduler::{Corpus, CorpusDir, SchedulerError, SeedRecord};
use crate::targets::{execute, BugId, TargetError, TargetProgram, TargetSpec, TestInput};

pub use config::{parse_alpha, FuzzConfig, Mode, Selection, DEFAULT_WARMUP_EXECS};
pub use labels::{LabelReads, LabelSpace};
pub use stats::{RoundStats, COVERAGE_HEADER};

/// Candidates executed between budget checks.
const EXEC_BATCH: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Model(#[from] MtnnError),
    #[error(transparent)]
    Corpus(#[from] SchedulerError),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no seed was retained after {execs} warm-up executions; give seeds or raise the warm-up budget")]
    NoSeeds { execs: u64 },
    #[error("{0} already holds a corpus; resume it or pick another out dir")]
    OutDirInUse(PathBuf),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Paths inside an out dir.
#[derive(Debug, Clone)]
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn new(root: &Path) -> Self {
        OutDir {
            root: root.to_path_buf(),
        }
    }

    pub fn crashes(&self) -> PathBuf {
        self.root.join("crashes")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn model_file(&self, round: usize) -> PathBuf {
        self.model_dir().join(format!("round_{round:04}.mtfz"))
    }

    pub fn final_model(&self) -> PathBuf {
        self.model_dir().join("final.mtfz")
    }

    pub fn label_columns(&self) -> PathBuf {
        self.model_dir().join("labels.json")
    }

    pub fn coverage_csv(&self) -> PathBuf {
        self.root.join("coverage.csv")
    }

    pub fn rounds_jsonl(&self) -> PathBuf {
        self.root.join("rounds.jsonl")
    }

    pub fn meta_jsonl(&self) -> PathBuf {
        self.root.join("meta.jsonl")
    }

    pub fn config_json(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn summary_json(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    fn create(&self) -> Result<(), OrchestratorError> {
        for d in [self.root.clone(), self.crashes(), self.model_dir()] {
            fs::create_dir_all(&d).map_err(io_at(&d))?;
        }
        Ok(())
    }
}

/// One line of `crashes/meta.jsonl`: a faulting input or the first input
/// that reported a given bug.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashMeta {
    pub id: usize,
    pub status: ExecStatus,
    pub bugs: Vec<String>,
    pub parent_id: Option<u64>,
    pub mutation_note: String,
    pub exec: u64,
}

/// What a finished run prints and writes to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub target: String,
    pub mode: Mode,
    pub rounds: usize,
    pub execs: u64,
    pub edges: usize,
    pub call_traces: usize,
    pub corpus: usize,
    pub bugs: Vec<String>,
    pub crashes: usize,
    pub wall_ms: u64,
    pub execs_per_sec: f64,
}

/// Order-preserving map over `items` on up to `workers` scoped threads.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if workers <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Evenly spread subset of `n` out of `m` embedding nodes.
fn spread_nodes(n: usize, m: usize) -> Vec<usize> {
    let n = n.min(m);
    (0..n).map(|i| i * m / n).collect()
}

/// Work already spent on one seed in earlier rounds. A round budget that
/// cuts an enumeration short lets the next round continue from there rather
/// than repeat the same leading offsets.
#[derive(Debug, Clone, Default)]
struct Explored {
    /// Every variant of the last plan ran.
    spent: bool,
    copies: bool,
    positions: BTreeSet<usize>,
}

pub struct Fuzzer {
    cfg: FuzzConfig,
    target: Arc<dyn TargetProgram>,
    corpus: Corpus,
    store: CorpusDir,
    out: OutDir,
    model: Option<ModelParams>,
    warm: Option<EmbeddingBundle>,
    freeze_next: bool,
    labels: LabelSpace,
    reads: LabelReads,
    rng: ChaCha8Rng,
    execs: u64,
    round: usize,
    bugs: BTreeMap<BugId, u64>,
    crash_seen: HashSet<Vec<u8>>,
    crashes: usize,
    history: Vec<RoundStats>,
    explored: BTreeMap<u64, Explored>,
    bootstrapped: bool,
    started: Instant,
    wall_offset_ms: u64,
}

impl Fuzzer {
    /// Instantiates the configured target and prepares a fresh out dir.
    pub fn new(cfg: FuzzConfig) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        let spec = TargetSpec::parse(&cfg.target)?;
        let target = spec.instantiate(cfg.max_len)?;
        Self::with_target(cfg, target)
    }

    /// Like [`Fuzzer::new`] with an already constructed target.
    pub fn with_target(cfg: FuzzConfig, target: Arc<dyn TargetProgram>) -> Result<Self, OrchestratorError> {
        let f = Self::prepare(cfg, target)?;
        if f.out.meta_jsonl().exists() || f.out.rounds_jsonl().exists() {
            return Err(OrchestratorError::OutDirInUse(f.out.root.clone()));
        }
        let p = f.out.config_json();
        fs::write(&p, f.cfg.to_json()).map_err(io_at(&p))?;
        Ok(f)
    }

    fn prepare(cfg: FuzzConfig, target: Arc<dyn TargetProgram>) -> Result<Self, OrchestratorError> {
        cfg.validate()?;
        if target.max_len() < cfg.max_len {
            return Err(OrchestratorError::Config(format!(
                "target accepts {} bytes, config max_len is {}",
                target.max_len(),
                cfg.max_len
            )));
        }
        let warm = match &cfg.warm_embedding {
            Some(p) => {
                let b = load_embedding(p)?;
                if b.n_in != cfg.max_len {
                    return Err(OrchestratorError::Model(MtnnError::Shape(format!(
                        "{} has n_in {}, this run uses max_len {}",
                        p.display(),
                        b.n_in,
                        cfg.max_len
                    ))));
                }
                Some(b)
            }
            None => None,
        };
        let out = OutDir::new(&cfg.out);
        out.create()?;
        let store = CorpusDir::create(&cfg.out)?;
        let corpus = Corpus::new(target.registry_id()).with_ctx_retention(cfg.retain_on_ctx);
        Ok(Fuzzer {
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            target,
            corpus,
            store,
            out,
            model: None,
            warm,
            freeze_next: false,
            labels: LabelSpace::default(),
            reads: LabelReads::default(),
            execs: 0,
            round: 0,
            bugs: BTreeMap::new(),
            crash_seen: HashSet::new(),
            crashes: 0,
            history: Vec::new(),
            explored: BTreeMap::new(),
            bootstrapped: false,
            started: Instant::now(),
            wall_offset_ms: 0,
            cfg,
        })
    }

    /// Picks up an interrupted run in `cfg.out`: stored seeds are re-executed
    /// to rebuild their coverage, and the newest model file is reloaded.
    pub fn resume(cfg: FuzzConfig) -> Result<Self, OrchestratorError> {
        let spec = TargetSpec::parse(&cfg.target)?;
        let target = spec.instantiate(cfg.max_len)?;
        let mut f = Self::prepare(cfg, target)?;
        let p = f.out.config_json();
        fs::write(&p, f.cfg.to_json()).map_err(io_at(&p))?;

        let mut last_exec = 0;
        for (meta, bytes) in f.store.load()? {
            last_exec = last_exec.max(meta.retained_at_exec);
            let input = TestInput::new(meta.id, bytes)?;
            let snap = execute(f.target.as_ref(), &input)?;
            f.corpus.restore(input, snap, meta)?;
        }
        let rp = f.out.rounds_jsonl();
        f.history = stats::read_rounds(&rp).map_err(io_at(&rp))?;
        if let Some(last) = f.history.last() {
            f.round = last.round;
            f.execs = last.execs.max(last_exec);
            f.wall_offset_ms = last.wall_ms;
        } else {
            f.execs = last_exec;
        }
        f.reload_crashes()?;
        let cols = f.out.label_columns();
        if cols.exists() {
            let text = fs::read_to_string(&cols).map_err(io_at(&cols))?;
            f.labels = serde_json::from_str(&text)
                .map_err(|e| OrchestratorError::Config(format!("{}: {e}", cols.display())))?;
        }
        if let Some(path) = f.latest_model() {
            info!("resuming with {}", path.display());
            f.model = Some(load_model(&path)?);
        }
        // Re-seeding from the round index keeps resumed runs reproducible
        // among themselves, though not identical to an uninterrupted run.
        f.rng = ChaCha8Rng::seed_from_u64(f.cfg.rng_seed ^ (f.round as u64).rotate_left(32));
        f.bootstrapped = !f.corpus.is_empty();
        Ok(f)
    }

    fn latest_model(&self) -> Option<PathBuf> {
        (1..=self.round).rev().map(|r| self.out.model_file(r)).find(|p| p.exists())
    }

    fn reload_crashes(&mut self) -> Result<(), OrchestratorError> {
        let p = self.out.crashes().join("meta.jsonl");
        if !p.exists() {
            return Ok(());
        }
        let file = fs::File::open(&p).map_err(io_at(&p))?;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_at(&p))?;
            let Ok(meta) = serde_json::from_str::<CrashMeta>(&line) else { break };
            self.crashes = self.crashes.max(meta.id + 1);
            for b in meta.bugs {
                let (t, l) = b.split_once(':').unwrap_or((self.target.name(), b.as_str()));
                self.bugs.entry(BugId::new(t, l)).or_insert(meta.exec);
            }
            if let Ok(bytes) = fs::read(self.crash_path(meta.id)) {
                self.crash_seen.insert(bytes);
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &FuzzConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn model(&self) -> Option<&ModelParams> {
        self.model.as_ref()
    }

    pub fn label_reads(&self) -> LabelReads {
        self.reads
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn execs(&self) -> u64 {
        self.execs
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn bugs(&self) -> &BTreeMap<BugId, u64> {
        &self.bugs
    }

    pub fn history(&self) -> &[RoundStats] {
        &self.history
    }

    pub fn out_dir(&self) -> &OutDir {
        &self.out
    }

    fn remaining(&self) -> u64 {
        match self.cfg.exec_budget {
            Some(b) => b.saturating_sub(self.execs),
            None => u64::MAX,
        }
    }

    fn wall_ms(&self) -> u64 {
        self.wall_offset_ms + self.started.elapsed().as_millis() as u64
    }

    /// True once the execution or time budget is used up.
    pub fn exhausted(&self) -> bool {
        if self.remaining() == 0 {
            return true;
        }
        match self.cfg.time_budget_secs {
            Some(t) => self.wall_ms() as f64 >= t * 1000.0,
            None => false,
        }
    }

    fn crash_path(&self, id: usize) -> PathBuf {
        self.out.crashes().join(format!("id_{id:08}"))
    }

    fn save_crash(&mut self, input: &TestInput, snap: &CoverageSnapshot, new_bugs: Vec<String>) -> Result<(), OrchestratorError> {
        if !self.crash_seen.insert(input.bytes.clone()) {
            return Ok(());
        }
        let id = self.crashes;
        self.crashes += 1;
        let p = self.crash_path(id);
        fs::write(&p, &input.bytes).map_err(io_at(&p))?;
        let meta = CrashMeta {
            id,
            status: snap.exec_status,
            bugs: new_bugs,
            parent_id: input.parent_id,
            mutation_note: input.mutation_note.clone(),
            exec: self.execs,
        };
        let m = self.out.crashes().join("meta.jsonl");
        stats::append_jsonl(&m, &meta).map_err(io_at(&m))
    }

    /// Bookkeeping for one finished execution. Returns whether the input
    /// joined the corpus.
    fn observe(&mut self, input: &TestInput, snap: CoverageSnapshot) -> Result<bool, OrchestratorError> {
        let mut new_bugs = Vec::new();
        for b in &snap.bugs {
            if !self.bugs.contains_key(b) {
                info!("exec {}: new bug {b}", self.execs);
                self.bugs.insert(b.clone(), self.execs);
                new_bugs.push(b.to_string());
            }
        }
        if snap.exec_status.is_fault() || !new_bugs.is_empty() {
            self.save_crash(input, &snap, new_bugs)?;
        }
        let out = self.corpus.ingest(input, snap, self.execs)?;
        if let Some(id) = out.id {
            let rec = self.corpus.get(id).expect("just inserted");
            self.store.append(rec)?;
        }
        Ok(out.retained)
    }

    /// Runs `candidates` in order, stopping early when a budget runs out.
    /// Returns how many were retained.
    fn execute_all(&mut self, candidates: &[TestInput]) -> Result<usize, OrchestratorError> {
        let mut retained = 0;
        for chunk in candidates.chunks(EXEC_BATCH) {
            if self.exhausted() {
                break;
            }
            let take = chunk.len().min(self.remaining().min(usize::MAX as u64) as usize);
            let chunk = &chunk[..take];
            let target = self.target.clone();
            let results = par_map(chunk, self.cfg.workers, |t| execute(target.as_ref(), t));
            for (input, res) in chunk.iter().zip(results) {
                self.execs += 1;
                match res {
                    Ok(snap) => retained += self.observe(input, snap)? as usize,
                    Err(e) => warn!("input {:?} not executed: {e}", input.mutation_note),
                }
            }
        }
        Ok(retained)
    }

    /// A random input while the corpus is empty or on a coin flip, otherwise
    /// random byte flips of a uniformly chosen seed.
    ///
    /// Half of the random inputs span the full `max_len`. Mutation never
    /// changes a seed's length, so without them the corpus can end up with
    /// only short seeds whose missing offsets no later round can reach.
    fn warmup_candidate(&mut self, ids: &[u64]) -> TestInput {
        if ids.is_empty() || self.rng.gen_bool(0.5) {
            let bytes = if self.rng.gen_bool(0.5) {
                let n = self.cfg.max_len;
                (0..n).map(|_| self.rng.gen()).collect()
            } else {
                random_input(&mut self.rng, self.cfg.max_len)
            };
            let mut t = TestInput::new(0, bytes).expect("non-empty");
            t.mutation_note = "random".into();
            t
        } else {
            self.flip_candidate(ids)
        }
    }

    fn flip_candidate(&mut self, ids: &[u64]) -> TestInput {
        let id = *ids.choose(&mut self.rng).expect("non-empty corpus");
        let seed = self.corpus.get(id).expect("listed id").input.clone();
        random_flips(&seed, &mut self.rng, 4)
    }

    /// Loads user seeds, or fills the corpus by random warm-up.
    pub fn bootstrap(&mut self) -> Result<(), OrchestratorError> {
        if let Some(dir) = self.cfg.seeds.clone() {
            let mut files: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(io_at(&dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let mut seeds = Vec::new();
            for p in files {
                let mut bytes = fs::read(&p).map_err(io_at(&p))?;
                if bytes.is_empty() {
                    continue;
                }
                if bytes.len() > self.cfg.max_len {
                    warn!("{}: truncated to {} bytes", p.display(), self.cfg.max_len);
                    bytes.truncate(self.cfg.max_len);
                }
                let mut t = TestInput::new(0, bytes)?;
                t.mutation_note = format!("seed:{}", p.file_name().unwrap_or_default().to_string_lossy());
                seeds.push(t);
            }
            self.execute_all(&seeds)?;
            info!("loaded {} of {} seeds from {}", self.corpus.len(), seeds.len(), dir.display());
        }
        if self.corpus.is_empty() {
            let budget = self.cfg.warmup_execs.min(self.remaining());
            let mut done = 0;
            while done < budget && !self.exhausted() {
                let n = (budget - done).min(EXEC_BATCH as u64) as usize;
                let ids: Vec<u64> = self.corpus.ids().collect();
                // The corpus only grows between batches, so candidates of one
                // batch are drawn against the same seed list.
                let batch: Vec<TestInput> = (0..n).map(|_| self.warmup_candidate(&ids)).collect();
                self.execute_all(&batch)?;
                done += n as u64;
            }
            info!("warm-up: {} execs, {} seeds", self.execs, self.corpus.len());
        }
        if self.corpus.is_empty() {
            return Err(OrchestratorError::NoSeeds { execs: self.execs });
        }
        self.bootstrapped = true;
        Ok(())
    }

    fn initial_model(&mut self) -> Result<ModelParams, OrchestratorError> {
        let spec = ArchSpec {
            n_in: self.cfg.max_len,
            encoder_dims: self.cfg.encoder_dims.clone(),
            n_edges: self.labels.n_edges(),
            n_ctx: self.labels.n_ctx(),
        };
        match &self.warm {
            Some(bundle) => {
                self.freeze_next = true;
                Ok(import_embedding(bundle, &spec, self.cfg.rng_seed)?)
            }
            None => Ok(build_model(spec, self.cfg.rng_seed)?),
        }
    }

    fn train_step(&mut self, records: &[SeedRecord], stats: &mut RoundStats) -> Result<(), OrchestratorError> {
        self.labels.refresh(self.corpus.global());
        let weights = self.cfg.weights();
        let recs: Vec<&SeedRecord> = records.iter().collect();
        let batch = self.labels.build_batch(
            &recs,
            self.cfg.max_len,
            &weights,
            self.cfg.beta_approach,
            &mut self.reads,
        )?;
        let (n_e, n_c) = (self.labels.n_edges(), self.labels.n_ctx());
        let base = match self.model.take() {
            Some(mut m) => {
                if m.spec.n_edges != n_e || m.spec.n_ctx != n_c {
                    m.resize_heads(n_e, n_c, self.cfg.rng_seed.wrapping_add(self.round as u64))?;
                }
                m
            }
            None => self.initial_model()?,
        };
        let tcfg = TrainConfig {
            epochs: self.cfg.epochs,
            lr: self.cfg.lr,
            batch_size: self.cfg.batch_size,
            weights,
            loss: LossKind::Adaptive,
            beta_clamp: self.cfg.beta_clamp,
            rng_seed: self.cfg.rng_seed.wrapping_add(self.round as u64),
            freeze_encoder: self.freeze_next,
            ..TrainConfig::default()
        };
        match train(&base, &batch, &tcfg) {
            Ok((model, metrics)) => {
                stats.trained = true;
                stats.train_loss = Some(metrics.final_loss);
                stats.edge = Some(metrics.edge);
                stats.ctx = weights.enabled(crate::mtnn::Task::Ctx).then_some(metrics.ctx);
                stats.approach_mse = weights.enabled(crate::mtnn::Task::Approach).then_some(metrics.approach_mse);
                if self.cfg.save_models {
                    let p = self.out.model_file(self.round);
                    save_model(&p, &model)?;
                    let cols = self.out.label_columns();
                    let text = serde_json::to_string(&self.labels).expect("label columns serialize");
                    fs::write(&cols, text).map_err(io_at(&cols))?;
                }
                self.model = Some(model);
                self.freeze_next = false;
            }
            Err(e @ (MtnnError::Divergence { .. } | MtnnError::NonFinite(_))) => {
                warn!("round {}: {e}; keeping the previous model", self.round);
                self.model = Some(base);
            }
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    fn plan(&self, records: &[SeedRecord]) -> Result<Vec<MutationPlan>, OrchestratorError> {
        let model = self.model.as_ref().expect("trained before planning");
        let nodes = self.cfg.saliency_nodes.map(|n| spread_nodes(n, model.embedding_dim()));
        let k = self.cfg.k;
        let max_len = self.cfg.max_len;
        let copy = self.cfg.direct_copy;
        let none = Explored::default();
        let plans = par_map(records, self.cfg.workers, |rec| -> Result<MutationPlan, MtnnError> {
            let done = self.explored.get(&rec.input.id).unwrap_or(&none);
            let x = pad_input::<f32>(&rec.input.bytes, max_len)?;
            let s = saliency_nodes(model, x.view(), nodes.as_deref())?;
            let mut hot = top_k(&s, rec.input.len(), k);
            hot.positions.retain(|p| !done.positions.contains(p));
            let log = if copy && !done.copies { rec.snapshot.cmp_log.as_slice() } else { &[] };
            Ok(MutationPlan::new(rec.input.clone(), hot, log))
        });
        plans.into_iter().map(|p| p.map_err(Into::into)).collect()
    }

    /// Variants for this round's seeds, continuing each seed's enumeration
    /// where earlier rounds left off. Once every selected seed is used up,
    /// their history is dropped and enumeration starts over under the
    /// current saliency ranking.
    fn round_variants(&mut self, records: &[SeedRecord], budget: usize) -> Result<Vec<TestInput>, OrchestratorError> {
        let mut plans = self.plan(records)?;
        if budget > 0 && plans.iter().all(MutationPlan::is_empty) {
            for r in records {
                self.explored.remove(&r.input.id);
            }
            plans = self.plan(records)?;
        }
        let variants = round_robin(&plans, budget);
        let mut taken: BTreeMap<u64, usize> = BTreeMap::new();
        for v in &variants {
            if let Some(p) = v.parent_id {
                *taken.entry(p).or_default() += 1;
            }
        }
        for plan in &plans {
            let n = taken.get(&plan.seed.id).copied().unwrap_or(0);
            let e = self.explored.entry(plan.seed.id).or_default();
            if n >= plan.copies.len() {
                e.copies = true;
            }
            e.spent = n >= plan.len();
            let full = n.saturating_sub(plan.copies.len()) / 255;
            e.positions.extend(plan.hot.positions.iter().take(full));
        }
        Ok(variants)
    }

    /// This round's seeds. Seeds whose whole enumeration already ran are
    /// passed over so the budget moves on to the next-ranked ones; when no
    /// candidate is left the history is cleared and ranking starts afresh.
    fn select(&mut self) -> Vec<u64> {
        let picked = self.select_open();
        if !picked.is_empty() {
            return picked;
        }
        self.explored.clear();
        self.select_open()
    }

    fn select_open(&mut self) -> Vec<u64> {
        let k = self.cfg.sample_budget();
        match self.cfg.selection {
            Selection::Importance => {
                let mut ids = self.corpus.select_training_set(self.cfg.train_budget, self.corpus.len());
                ids.retain(|&id| !self.spent(id));
                ids.truncate(k);
                ids
            }
            Selection::Random => {
                let open: Vec<u64> = self.corpus.ids().filter(|&id| !self.spent(id)).collect();
                open.choose_multiple(&mut self.rng, k.min(open.len())).copied().collect()
            }
        }
    }

    fn spent(&self, id: u64) -> bool {
        self.explored.get(&id).is_some_and(|e| e.spent)
    }

    /// One select, train, mutate, execute cycle.
    pub fn fuzz_round(&mut self) -> Result<RoundStats, OrchestratorError> {
        if self.corpus.is_empty() {
            return Err(OrchestratorError::Config("fuzz_round needs a non-empty corpus".into()));
        }
        self.round += 1;
        let ids = self.select();
        self.corpus.start_round();
        let records: Vec<SeedRecord> = ids
            .iter()
            .map(|id| self.corpus.get(*id).expect("selected id").clone())
            .collect();
        let mut stats = RoundStats {
            round: self.round,
            selected: records.len(),
            ..RoundStats::default()
        };
        let budget = (self.cfg.round_budget as u64).min(self.remaining()) as usize;

        if self.cfg.mode.uses_model() {
            let due = self.model.is_none() || (self.round - 1) % self.cfg.retrain_every == 0;
            if due {
                self.train_step(&records, &mut stats)?;
            }
            let variants = self.round_variants(&records, budget)?;
            stats.variants = variants.len();
            stats.retained = self.execute_all(&variants)?;
        } else {
            let ids: Vec<u64> = self.corpus.ids().collect();
            let mut done = 0;
            while done < budget && !self.exhausted() {
                let n = (budget - done).min(EXEC_BATCH);
                let batch: Vec<TestInput> = (0..n).map(|_| self.flip_candidate(&ids)).collect();
                stats.retained += self.execute_all(&batch)?;
                done += n;
            }
            stats.variants = done;
        }

        let g = self.corpus.global();
        stats.execs = self.execs;
        stats.edges = g.edge.len();
        stats.call_traces = g.ctx.len();
        stats.bugs = self.bugs.len();
        stats.corpus = self.corpus.len();
        stats.wall_ms = self.wall_ms();
        debug!("round {:?}", stats);
        info!(
            "round {}: execs {} edges {} call traces {} bugs {} corpus {}",
            stats.round, stats.execs, stats.edges, stats.call_traces, stats.bugs, stats.corpus
        );
        let csv = self.out.coverage_csv();
        stats::append_csv(&csv, &stats).map_err(io_at(&csv))?;
        let rj = self.out.rounds_jsonl();
        stats::append_jsonl(&rj, &stats).map_err(io_at(&rj))?;
        self.history.push(stats.clone());
        Ok(stats)
    }

    /// Bootstrap (unless resumed), rounds until a budget runs out, then the
    /// final model and `summary.json`.
    pub fn run(&mut self) -> Result<RunReport, OrchestratorError> {
        if !self.bootstrapped {
            self.bootstrap()?;
        }
        if !self.out.coverage_csv().exists() {
            let csv = self.out.coverage_csv();
            stats::write_csv(&csv, &[]).map_err(io_at(&csv))?;
        }
        while self.round < self.cfg.rounds && !self.exhausted() {
            self.fuzz_round()?;
        }
        self.finish()
    }

    pub fn report(&self) -> RunReport {
        let wall_ms = self.wall_ms();
        let g = self.corpus.global();
        RunReport {
            target: self.cfg.target.clone(),
            mode: self.cfg.mode,
            rounds: self.round,
            execs: self.execs,
            edges: g.edge.len(),
            call_traces: g.ctx.len(),
            corpus: self.corpus.len(),
            bugs: self.bugs.keys().map(|b| b.to_string()).collect(),
            crashes: self.crashes,
            wall_ms,
            execs_per_sec: self.execs as f64 / (wall_ms.max(1) as f64 / 1000.0),
        }
    }

    fn finish(&mut self) -> Result<RunReport, OrchestratorError> {
        if let (Some(m), true) = (&self.model, self.cfg.save_models) {
            save_model(&self.out.final_model(), m)?;
        }
        let report = self.report();
        let p = self.out.summary_json();
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(&p, text).map_err(io_at(&p))?;
        Ok(report)
    }
}

/// Runs a fresh campaign described by `cfg`.
pub fn run(cfg: FuzzConfig) -> Result<RunReport, OrchestratorError> {
    Fuzzer::new(cfg)?.run()
}

/// Rewrites `coverage.csv` from `rounds.jsonl` and returns a printable
/// summary of the out dir.
pub fn report(out: &Path) -> Result<String, OrchestratorError> {
    let dir = OutDir::new(out);
    let rp = dir.rounds_jsonl();
    let rounds = stats::read_rounds(&rp).map_err(io_at(&rp))?;
    let csv = dir.coverage_csv();
    stats::write_csv(&csv, &rounds).map_err(io_at(&csv))?;
    let mut text = String::new();
    let sp = dir.summary_json();
    if sp.exists() {
        let s = fs::read_to_string(&sp).map_err(io_at(&sp))?;
        if let Ok(r) = serde_json::from_str::<RunReport>(&s) {
            text.push_str(&format!(
                "target {} mode {}: {} rounds, {} execs ({:.0}/s), {} edges, {} call traces, {} seeds, {} crashes\n",
                r.target, r.mode, r.rounds, r.execs, r.execs_per_sec, r.edges, r.call_traces, r.corpus, r.crashes
            ));
            for b in &r.bugs {
                text.push_str(&format!("  bug {b}\n"));
            }
        }
    }
    text.push_str(COVERAGE_HEADER);
    text.push('\n');
    for r in &rounds {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(target: &str, out: &Path) -> FuzzConfig {
        FuzzConfig {
            encoder_dims: vec![16, 8],
            epochs: 3,
            warmup_execs: 300,
            round_budget: 600,
            k: 8,
            train_budget: 16,
            rounds: 2,
            rng_seed: 5,
            ..FuzzConfig::for_target(target, out)
        }
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<u32> = (0..103).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(par_map(&v, 1, |x| x + 1)[102], 103);
    }

    #[test]
    fn spread_nodes_examples() {
        assert_eq!(spread_nodes(4, 8), vec![0, 2, 4, 6]);
        assert_eq!(spread_nodes(10, 3), vec![0, 1, 2]);
    }

    #[test]
    fn zero_rounds_is_bootstrap_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FuzzConfig { rounds: 0, ..small("builtin:chain", dir.path()) };
        let report = run(cfg).unwrap();
        assert_eq!(report.rounds, 0);
        assert!(report.corpus >= 1);
        let csv = fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
        assert_eq!(csv.trim(), COVERAGE_HEADER);
    }

    #[test]
    fn empty_seed_dir_and_no_warmup_fails() {
        let dir = tempfile::tempdir().unwrap();
        let seeds = tempfile::tempdir().unwrap();
        let cfg = FuzzConfig {
            seeds: Some(seeds.path().to_path_buf()),
            warmup_execs: 0,
            ..small("builtin:chain", dir.path())
        };
        assert!(matches!(run(cfg), Err(OrchestratorError::NoSeeds { .. })));
    }

    #[test]
    fn seed_dir_is_deduplicated() {
        let dir = tempfile::tempdir().unwrap();
        let seeds = tempfile::tempdir().unwrap();
        fs::write(seeds.path().join("a"), b"cH").unwrap();
        fs::write(seeds.path().join("b"), b"cH").unwrap();
        fs::write(seeds.path().join("c"), b"x").unwrap();
        let cfg = FuzzConfig {
            seeds: Some(seeds.path().to_path_buf()),
            rounds: 0,
            ..small("builtin:chain", dir.path())
        };
        let mut f = Fuzzer::new(cfg).unwrap();
        f.bootstrap().unwrap();
        assert!(f.corpus().len() <= 3 && f.corpus().len() >= 1);
        assert_eq!(f.execs(), 3);
    }

    #[test]
    fn rounds_write_layout_and_stay_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let report = run(small("builtin:ctx_demo", dir.path())).unwrap();
        assert_eq!(report.rounds, 2);
        for p in ["config.json", "meta.jsonl", "coverage.csv", "summary.json", "model/round_0001.mtfz", "model/final.mtfz"] {
            assert!(dir.path().join(p).exists(), "{p}");
        }
        let csv = fs::read_to_string(dir.path().join("coverage.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let rows = stats::read_rounds(&dir.path().join("rounds.jsonl")).unwrap();
        assert!(rows.windows(2).all(|w| w[0].edges <= w[1].edges && w[0].bugs <= w[1].bugs));
        let cfg = FuzzConfig::load(&dir.path().join("config.json")).unwrap();
        assert_eq!(cfg, small("builtin:ctx_demo", dir.path()));
    }

    #[test]
    fn out_dir_in_use_is_refused_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small("builtin:ctx_demo", dir.path());
        run(cfg.clone()).unwrap();
        assert!(matches!(Fuzzer::new(cfg.clone()), Err(OrchestratorError::OutDirInUse(_))));
        let before = Corpus::clone(Fuzzer::resume(cfg.clone()).unwrap().corpus());
        let mut more = Fuzzer::resume(FuzzConfig { rounds: 3, ..cfg }).unwrap();
        assert_eq!(more.round(), 2);
        assert!(more.model().is_some());
        let r = more.run().unwrap();
        assert_eq!(r.rounds, 3);
        assert!(r.corpus >= before.len());
    }

    #[test]
    fn exec_budget_is_a_hard_cap() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FuzzConfig {
            exec_budget: Some(1000),
            rounds: 50,
            ..small("builtin:magic_maze", dir.path())
        };
        let r = run(cfg).unwrap();
        assert_eq!(r.execs, 1000);
    }

    #[test]
    fn ablation_never_reads_disabled_labels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FuzzConfig { mode: Mode::EcOnly, ..small("builtin:ctx_demo", dir.path()) };
        let mut f = Fuzzer::new(cfg).unwrap();
        f.run().unwrap();
        let reads = f.label_reads();
        assert!(reads.edge > 0);
        assert_eq!((reads.ctx, reads.approach), (0, 0));
    }

    #[test]
    fn random_baseline_trains_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FuzzConfig { mode: Mode::RandomBaseline, ..small("builtin:tlv_a", dir.path()) };
        let mut f = Fuzzer::new(cfg).unwrap();
        let r = f.run().unwrap();
        assert!(f.model().is_none());
        assert_eq!(f.label_reads(), LabelReads::default());
        assert_eq!(r.execs, 300 + 2 * 600);
    }

    #[test]
    fn mismatched_warm_embedding_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m: ModelParams = build_model(ArchSpec::new(10, 1, 1).with_encoder(&[4]), 0).unwrap();
        let p = dir.path().join("e.mtfe");
        crate::mtnn::save_embedding(&p, &crate::mtnn::export_embedding(&m)).unwrap();
        let cfg = FuzzConfig {
            warm_embedding: Some(p),
            ..small("builtin:tlv_b", &dir.path().join("out"))
        };
        assert!(matches!(Fuzzer::new(cfg), Err(OrchestratorError::Model(MtnnError::Shape(_)))));
    }

    #[test]
    fn enumeration_continues_across_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FuzzConfig {
            sample_budget: Some(1),
            round_budget: 2 * 255,
            direct_copy: false,
            ..small("builtin:chain", &dir.path().join("out"))
        };
        let mut f = Fuzzer::new(cfg).unwrap();
        f.bootstrap().unwrap();
        for _ in 0..4 {
            let before = f.explored.clone();
            let picked = f.select_open();
            f.fuzz_round().unwrap();
            let id = picked[0];
            let done = &f.explored[&id].positions;
            // Two fresh offsets per round, none repeated.
            let prior = before.get(&id).map_or(0, |e| e.positions.len());
            assert_eq!(done.len(), prior + 2);
        }
    }

    #[test]
    fn spent_seeds_are_skipped_until_none_are_left() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = Fuzzer::new(small("builtin:tlv_a", &dir.path().join("out"))).unwrap();
        f.bootstrap().unwrap();
        let first = f.select();
        assert!(!first.is_empty());
        f.explored.entry(first[0]).or_default().spent = true;
        let second = f.select();
        assert!(!second.contains(&first[0]));
        let ids: Vec<u64> = f.corpus.ids().collect();
        for id in ids {
            f.explored.entry(id).or_default().spent = true;
        }
        assert_eq!(f.select(), first);
        assert!(f.explored.is_empty());
    }
}
