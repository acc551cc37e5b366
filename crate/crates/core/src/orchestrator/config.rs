use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::mtnn::{TaskWeights, DEFAULT_BETA_CLAMP, DEFAULT_ENCODER_DIMS};
use crate::mutator::{DEFAULT_ROUND_BUDGET, DEFAULT_TOP_K};
use crate::scheduler::DEFAULT_RARE_EDGES;

use super::OrchestratorError;

pub const DEFAULT_WARMUP_EXECS: u64 = 5_000;

/// Which coverage tasks the network learns, or no network at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "mtfuzz")]
    Mtfuzz,
    #[serde(rename = "ec-only")]
    EcOnly,
    #[serde(rename = "ec+ctx")]
    EcCtx,
    #[serde(rename = "ec+approach")]
    EcApproach,
    #[serde(rename = "random-baseline")]
    RandomBaseline,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Mtfuzz,
        Mode::EcOnly,
        Mode::EcCtx,
        Mode::EcApproach,
        Mode::RandomBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mtfuzz => "mtfuzz",
            Mode::EcOnly => "ec-only",
            Mode::EcCtx => "ec+ctx",
            Mode::EcApproach => "ec+approach",
            Mode::RandomBaseline => "random-baseline",
        }
    }

    pub fn uses_model(self) -> bool {
        self != Mode::RandomBaseline
    }

    /// Task weights after masking the tasks this mode leaves out.
    pub fn weights(self, alpha: [f64; 3]) -> TaskWeights {
        let [e, c, a] = alpha;
        let (c, a) = match self {
            Mode::Mtfuzz | Mode::RandomBaseline => (c, a),
            Mode::EcOnly => (0.0, 0.0),
            Mode::EcCtx => (c, 0.0),
            Mode::EcApproach => (0.0, a),
        };
        TaskWeights {
            edge: e,
            ctx: c,
            approach: a,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Mode::ALL.iter().map(|m| m.as_str()).collect();
                format!("unknown mode {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// How each round picks the seeds it trains on and mutates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// New-edge seeds plus representatives of the rarest edges.
    Importance,
    /// Uniform draw of the same size from the whole corpus.
    Random,
}

impl FromStr for Selection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "importance" => Ok(Selection::Importance),
            "random" => Ok(Selection::Random),
            _ => Err(format!("unknown selection {s:?}; expected importance or random")),
        }
    }
}

/// Everything a run needs. Written as `config.json` in the out dir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuzzConfig {
    /// `builtin:NAME` or `exec:PATH [ARGS..]`.
    pub target: String,
    pub seeds: Option<PathBuf>,
    pub out: PathBuf,
    /// Longest input; also the network's input width.
    pub max_len: usize,
    pub rounds: usize,
    /// Cap on executions, warm-up included.
    pub exec_budget: Option<u64>,
    pub time_budget_secs: Option<f64>,
    pub k: usize,
    /// Number of rarest edges whose representatives join the training set.
    pub train_budget: usize,
    /// Training set size cap; defaults to `train_budget`.
    pub sample_budget: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: [f64; 3],
    pub beta_approach: f64,
    pub beta_clamp: f64,
    pub encoder_dims: Vec<usize>,
    /// Embedding nodes used for saliency; all of them when unset.
    pub saliency_nodes: Option<usize>,
    pub round_budget: usize,
    pub retrain_every: usize,
    pub warmup_execs: u64,
    pub rng_seed: u64,
    pub mode: Mode,
    pub selection: Selection,
    pub direct_copy: bool,
    pub retain_on_ctx: bool,
    pub warm_embedding: Option<PathBuf>,
    pub workers: usize,
    /// Write `model/round_%04d.mtfz` after every training.
    pub save_models: bool,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            target: String::new(),
            seeds: None,
            out: PathBuf::from("out"),
            max_len: 0,
            rounds: 10,
            exec_budget: None,
            time_budget_secs: None,
            k: DEFAULT_TOP_K,
            train_budget: DEFAULT_RARE_EDGES,
            sample_budget: None,
            epochs: 100,
            lr: 0.001,
            batch_size: 32,
            alpha: [1.0, 1.0, 1.0],
            beta_approach: crate::coverage::DEFAULT_BETA_APPROACH,
            beta_clamp: DEFAULT_BETA_CLAMP,
            encoder_dims: DEFAULT_ENCODER_DIMS.to_vec(),
            saliency_nodes: None,
            round_budget: DEFAULT_ROUND_BUDGET,
            retrain_every: 1,
            warmup_execs: DEFAULT_WARMUP_EXECS,
            rng_seed: 0,
            mode: Mode::Mtfuzz,
            selection: Selection::Importance,
            direct_copy: true,
            retain_on_ctx: true,
            warm_embedding: None,
            workers: 1,
            save_models: true,
        }
    }
}

impl FuzzConfig {
    /// A config for `target` with the target's default `max_len` when it is
    /// a builtin.
    pub fn for_target(target: &str, out: impl Into<PathBuf>) -> Self {
        let name = target.strip_prefix("builtin:").unwrap_or(target);
        FuzzConfig {
            target: target.to_string(),
            out: out.into(),
            max_len: crate::targets::default_max_len(name).unwrap_or(0),
            ..FuzzConfig::default()
        }
    }

    pub fn sample_budget(&self) -> usize {
        self.sample_budget.unwrap_or(self.train_budget)
    }

    pub fn weights(&self) -> TaskWeights {
        self.mode.weights(self.alpha)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.target.is_empty() {
            return bad("target is required".into());
        }
        let counts = [
            ("max_len", self.max_len),
            ("k", self.k),
            ("train_budget", self.train_budget),
            ("sample_budget", self.sample_budget()),
            ("batch_size", self.batch_size),
            ("round_budget", self.round_budget),
            ("retrain_every", self.retrain_every),
            ("workers", self.workers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.mode.uses_model() && self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) || self.alpha[0] <= 0.0 {
            return bad(format!("alpha {:?}: edge weight must be positive, others non-negative", self.alpha));
        }
        if !(self.beta_approach > 0.0 && self.beta_approach < 1.0) {
            return bad(format!("beta_approach must lie in (0, 1), got {}", self.beta_approach));
        }
        if !(self.beta_clamp > 0.0 && self.beta_clamp.is_finite()) {
            return bad("beta_clamp must be positive".into());
        }
        if self.encoder_dims.is_empty() || self.encoder_dims.contains(&0) {
            return bad(format!("encoder dims {:?} must be positive", self.encoder_dims));
        }
        if self.saliency_nodes == Some(0) {
            return bad("saliency_nodes must be positive".into());
        }
        if let Some(t) = self.time_budget_secs {
            if !(t > 0.0) {
                return bad("time budget must be positive".into());
            }
        }
        if self.exec_budget == Some(0) {
            return bad("exec budget must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, OrchestratorError> {
        serde_json::from_str(s).map_err(|e| OrchestratorError::Config(format!("config.json: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|source| OrchestratorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Parses `a,b,c` into three task weights.
pub fn parse_alpha(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated weights, got {s:?}"));
    }
    let mut out = [0.0; 3];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = p.parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(out)
}
