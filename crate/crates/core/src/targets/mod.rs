//! Execution substrate: the target contract, the built-in synthetic targets
//! and the subprocess adapter for external programs.

mod chain;
mod ctx_demo;
mod ctx_ext;
mod magic_maze;
pub mod subprocess;
mod tlv;
mod xmlish;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coverage::{
    CoverageError, CoverageSnapshot, EdgeId, ExecStatus, RegistryId, StackHash, StaticGraph,
    Tracer,
};

pub use magic_maze::{MAZE_MAGICS, MAZE_OFFSETS};
pub use subprocess::{SubprocessTarget, WireReply};
pub use tlv::TLV_MAGIC;

#[derive(Debug, thiserror::Error)]
pub enum TargetError {
    #[error("unknown target `{name}`; available: {}", CATALOG.join(", "))]
    UnknownTarget { name: String },
    #[error("input of {len} bytes exceeds max_len {max_len}")]
    InputTooLong { len: usize, max_len: usize },
    #[error("test inputs must hold at least one byte")]
    EmptyInput,
    #[error("subprocess protocol violation: {0}")]
    Protocol(String),
    #[error("failed to spawn `{path}`: {source}")]
    Spawn {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o error talking to target: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Coverage(#[from] CoverageError),
}

/// Names accepted by [`builtin`].
pub const CATALOG: &[&str] = &[
    "ctx_demo",
    "ctx_ext",
    "chain",
    "tlv_a",
    "tlv_b",
    "xmlish_a",
    "xmlish_b",
    "magic_maze",
];

/// One fuzzing input and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestInput {
    pub id: u64,
    pub bytes: Vec<u8>,
    pub parent_id: Option<u64>,
    pub mutation_note: String,
}

impl TestInput {
    pub fn new(id: u64, bytes: Vec<u8>) -> Result<Self, TargetError> {
        if bytes.is_empty() {
            return Err(TargetError::EmptyInput);
        }
        Ok(TestInput {
            id,
            bytes,
            parent_id: None,
            mutation_note: String::new(),
        })
    }

    /// A variant of `self`; id 0 until the corpus assigns one.
    pub fn derive(&self, bytes: Vec<u8>, note: impl Into<String>) -> Self {
        TestInput {
            id: 0,
            bytes,
            parent_id: Some(self.id),
            mutation_note: note.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Operands of one executed comparison.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CmpObservation {
    pub width: u8,
    pub lhs: Vec<u8>,
    pub rhs: Vec<u8>,
    pub lhs_is_constant: bool,
}

impl CmpObservation {
    /// `None` unless both operands have the same width of 2, 4 or 8 bytes.
    pub fn new(lhs: &[u8], rhs: &[u8], lhs_is_constant: bool) -> Option<Self> {
        let w = lhs.len();
        if w != rhs.len() || !matches!(w, 2 | 4 | 8) {
            return None;
        }
        Some(CmpObservation {
            width: w as u8,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            lhs_is_constant,
        })
    }

    /// `(constant, variable)` operands.
    pub fn split(&self) -> (&[u8], &[u8]) {
        if self.lhs_is_constant {
            (&self.lhs, &self.rhs)
        } else {
            (&self.rhs, &self.lhs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BugId {
    pub target: String,
    pub label: String,
}

impl BugId {
    pub fn new(target: &str, label: &str) -> Self {
        BugId {
            target: target.to_string(),
            label: label.to_string(),
        }
    }
}

impl fmt::Display for BugId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.target, self.label)
    }
}

/// A program under test. Execution must be deterministic in the input bytes.
pub trait TargetProgram: Send + Sync {
    fn name(&self) -> &str;

    fn registry_id(&self) -> RegistryId;

    fn max_len(&self) -> usize;

    /// Runs one input. Callers go through [`execute`], which checks length.
    fn run(&self, bytes: &[u8]) -> Result<CoverageSnapshot, TargetError>;

    /// Static control-flow graph, when the target has one.
    fn graph(&self) -> Option<&StaticGraph> {
        None
    }
}

pub fn execute(
    target: &dyn TargetProgram,
    input: &TestInput,
) -> Result<CoverageSnapshot, TargetError> {
    if input.bytes.is_empty() {
        return Err(TargetError::EmptyInput);
    }
    if input.bytes.len() > target.max_len() {
        return Err(TargetError::InputTooLong {
            len: input.bytes.len(),
            max_len: target.max_len(),
        });
    }
    target.run(&input.bytes)
}

/// Body of an in-process target: reports coverage through the tracer.
pub(crate) trait Program: Send + Sync {
    fn graph(&self) -> &StaticGraph;
    fn run(&self, t: &mut Tracer<'_>, input: &[u8]);
}

pub struct BuiltinTarget {
    program: Box<dyn Program>,
    max_len: usize,
}

impl fmt::Debug for BuiltinTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BuiltinTarget")
            .field("name", &self.program.graph().name())
            .field("max_len", &self.max_len)
            .finish()
    }
}

impl BuiltinTarget {
    /// Executes and also returns the distinct non-empty-stack contexts seen.
    pub fn run_with_contexts(
        &self,
        bytes: &[u8],
    ) -> (CoverageSnapshot, BTreeSet<(StackHash, EdgeId)>) {
        let mut t = Tracer::new(self.program.graph());
        self.program.run(&mut t, bytes);
        t.finish_with_contexts(ExecStatus::Ok)
    }

    pub fn static_graph(&self) -> &StaticGraph {
        self.program.graph()
    }
}

impl TargetProgram for BuiltinTarget {
    fn name(&self) -> &str {
        self.program.graph().name()
    }

    fn registry_id(&self) -> RegistryId {
        self.program.graph().registry().id()
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn run(&self, bytes: &[u8]) -> Result<CoverageSnapshot, TargetError> {
        let mut t = Tracer::new(self.program.graph());
        self.program.run(&mut t, bytes);
        Ok(t.finish(ExecStatus::Ok))
    }

    fn graph(&self) -> Option<&StaticGraph> {
        Some(self.program.graph())
    }
}

/// Default input length bound for each built-in target.
pub fn default_max_len(name: &str) -> Option<usize> {
    Some(match name {
        "ctx_demo" => 16,
        "ctx_ext" => 32,
        "chain" => 32,
        "tlv_a" | "tlv_b" => 64,
        "xmlish_a" | "xmlish_b" => 48,
        "magic_maze" => 64,
        _ => return None,
    })
}

pub fn builtin(name: &str) -> Result<BuiltinTarget, TargetError> {
    let max_len = default_max_len(name).ok_or_else(|| TargetError::UnknownTarget {
        name: name.to_string(),
    })?;
    builtin_sized(name, max_len)
}

pub fn builtin_sized(name: &str, max_len: usize) -> Result<BuiltinTarget, TargetError> {
    let program: Box<dyn Program> = match name {
        "ctx_demo" => Box::new(ctx_demo::CtxDemo::new()?),
        "ctx_ext" => Box::new(ctx_ext::CtxExt::new()?),
        "chain" => Box::new(chain::Chain::new()?),
        "tlv_a" => Box::new(tlv::TlvA::new()?),
        "tlv_b" => Box::new(tlv::TlvB::new()?),
        "xmlish_a" => Box::new(xmlish::XmlishA::new()?),
        "xmlish_b" => Box::new(xmlish::XmlishB::new()?),
        "magic_maze" => Box::new(magic_maze::MagicMaze::new()?),
        _ => {
            return Err(TargetError::UnknownTarget {
                name: name.to_string(),
            })
        }
    };
    Ok(BuiltinTarget { program, max_len })
}

pub fn subprocess_target(path: &Path) -> Result<SubprocessTarget, TargetError> {
    SubprocessTarget::new(path, Vec::new(), subprocess::DEFAULT_MAX_LEN)
}

/// How a target is named on the command line: `builtin:NAME` or `exec:PATH`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    Builtin(String),
    Exec { path: String, args: Vec<String> },
}

impl TargetSpec {
    pub fn parse(s: &str) -> Result<Self, TargetError> {
        if let Some(name) = s.strip_prefix("builtin:") {
            Ok(TargetSpec::Builtin(name.to_string()))
        } else if let Some(rest) = s.strip_prefix("exec:") {
            let mut parts = rest.split_whitespace().map(str::to_string);
            let path = parts.next().unwrap_or_default();
            Ok(TargetSpec::Exec {
                path,
                args: parts.collect(),
            })
        } else if CATALOG.contains(&s) {
            Ok(TargetSpec::Builtin(s.to_string()))
        } else {
            Err(TargetError::UnknownTarget {
                name: s.to_string(),
            })
        }
    }

    pub fn instantiate(&self, max_len: usize) -> Result<Arc<dyn TargetProgram>, TargetError> {
        Ok(match self {
            TargetSpec::Builtin(name) => Arc::new(builtin_sized(name, max_len)?),
            TargetSpec::Exec { path, args } => {
                Arc::new(SubprocessTarget::new(Path::new(path), args.clone(), max_len)?)
            }
        })
    }
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSpec::Builtin(n) => write!(f, "builtin:{n}"),
            TargetSpec::Exec { path, args } if args.is_empty() => write!(f, "exec:{path}"),
            TargetSpec::Exec { path, args } => write!(f, "exec:{path} {}", args.join(" ")),
        }
    }
}
