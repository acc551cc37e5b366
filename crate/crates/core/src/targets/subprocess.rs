//! Persistent child-process targets speaking a small binary protocol.
//!
//! All integers are little endian.
//!
//! ```text
//! request: u32 N, N input bytes
//! reply:   u8 status (0 ok, 1 crash, 2 timeout)
//!          u32 n_edges, n_edges x u32 edge id
//!          u32 n_ctx,   n_ctx   x u32 call-trace id
//!          u32 n_app,   n_app   x (u32 edge id, u8 level percent in {0, 50, 100})
//!          u32 n_cmp,   n_cmp   x (u8 width, lhs[width], rhs[width], u8 lhs_is_constant)
//!          u32 n_bugs,  n_bugs  x u32 bug id
//! ```
//!
//! Edge ids follow the hashed convention `((prev >> 1) ^ cur) % 65536`.
//! The child handles one request at a time and stays alive between them.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::coverage::{
    ApproachLevel, BlockId, CallTraceId, CoverageSnapshot, EdgeId, EdgeRegistry, ExecStatus,
    RegistryId, HASHED_BITMAP_SIZE,
};

use super::{BugId, CmpObservation, TargetError, TargetProgram};

pub const DEFAULT_MAX_LEN: usize = 1 << 16;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

/// Upper bound on any list length in a reply.
const MAX_ENTRIES: u32 = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    /// The stream ended before the reply was complete.
    #[error("reply truncated")]
    Truncated,
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for ProtocolError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ProtocolError::Truncated
        } else {
            ProtocolError::Io(e)
        }
    }
}

/// Decoded reply, before it is turned into a snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WireReply {
    pub status: u8,
    pub edges: Vec<u32>,
    pub ctx: Vec<u32>,
    pub approach: Vec<(u32, u8)>,
    pub cmps: Vec<CmpObservation>,
    pub bugs: Vec<u32>,
}

pub fn write_request(w: &mut impl Write, input: &[u8]) -> io::Result<()> {
    w.write_all(&(input.len() as u32).to_le_bytes())?;
    w.write_all(input)?;
    w.flush()
}

/// Reads one request; `Ok(None)` on a clean end of stream.
pub fn read_request(r: &mut impl Read, max_len: usize) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > max_len {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("request of {n} bytes exceeds {max_len}"),
        ));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn write_reply(w: &mut impl Write, reply: &WireReply) -> io::Result<()> {
    let mut out = Vec::new();
    out.push(reply.status);
    put_u32s(&mut out, &reply.edges);
    put_u32s(&mut out, &reply.ctx);
    out.extend_from_slice(&(reply.approach.len() as u32).to_le_bytes());
    for (id, level) in &reply.approach {
        out.extend_from_slice(&id.to_le_bytes());
        out.push(*level);
    }
    out.extend_from_slice(&(reply.cmps.len() as u32).to_le_bytes());
    for c in &reply.cmps {
        out.push(c.width);
        out.extend_from_slice(&c.lhs);
        out.extend_from_slice(&c.rhs);
        out.push(c.lhs_is_constant as u8);
    }
    put_u32s(&mut out, &reply.bugs);
    w.write_all(&out)?;
    w.flush()
}

fn put_u32s(out: &mut Vec<u8>, xs: &[u32]) {
    out.extend_from_slice(&(xs.len() as u32).to_le_bytes());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_u8(r: &mut impl Read) -> Result<u8, ProtocolError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u32(r: &mut impl Read) -> Result<u32, ProtocolError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_count(r: &mut impl Read, what: &str) -> Result<usize, ProtocolError> {
    let n = get_u32(r)?;
    if n > MAX_ENTRIES {
        return Err(ProtocolError::Malformed(format!("{what} count {n} exceeds {MAX_ENTRIES}")));
    }
    Ok(n as usize)
}

pub fn read_reply(r: &mut impl Read) -> Result<WireReply, ProtocolError> {
    let status = get_u8(r)?;
    if status > 2 {
        return Err(ProtocolError::Malformed(format!("status byte {status}")));
    }
    let mut reply = WireReply {
        status,
        ..WireReply::default()
    };
    for _ in 0..get_count(r, "edge")? {
        reply.edges.push(get_u32(r)?);
    }
    for _ in 0..get_count(r, "call-trace")? {
        reply.ctx.push(get_u32(r)?);
    }
    for _ in 0..get_count(r, "approach")? {
        let id = get_u32(r)?;
        let level = get_u8(r)?;
        if ApproachLevel::from_percent(level).is_none() {
            return Err(ProtocolError::Malformed(format!("approach level {level}")));
        }
        reply.approach.push((id, level));
    }
    for _ in 0..get_count(r, "cmp")? {
        let width = get_u8(r)?;
        if !matches!(width, 2 | 4 | 8) {
            return Err(ProtocolError::Malformed(format!("cmp width {width}")));
        }
        let mut lhs = vec![0u8; width as usize];
        let mut rhs = vec![0u8; width as usize];
        r.read_exact(&mut lhs)?;
        r.read_exact(&mut rhs)?;
        let lhs_is_constant = get_u8(r)? != 0;
        reply.cmps.push(CmpObservation {
            width,
            lhs,
            rhs,
            lhs_is_constant,
        });
    }
    for _ in 0..get_count(r, "bug")? {
        reply.bugs.push(get_u32(r)?);
    }
    Ok(reply)
}

/// Converts a decoded reply into a snapshot; ids must fit the hashed bitmap.
pub fn reply_to_snapshot(
    reply: &WireReply,
    registry: RegistryId,
    target: &str,
) -> Result<CoverageSnapshot, ProtocolError> {
    let mut snap = CoverageSnapshot::empty(registry);
    let check = |id: u32, what: &str| {
        if id >= HASHED_BITMAP_SIZE {
            Err(ProtocolError::Malformed(format!("{what} id {id} outside bitmap")))
        } else {
            Ok(EdgeId(id))
        }
    };
    for &e in &reply.edges {
        let e = check(e, "edge")?;
        snap.edge.set(e);
        snap.approach.raise(e, ApproachLevel::Hit);
    }
    for &c in &reply.ctx {
        snap.ctx.set(CallTraceId(c));
    }
    for &(e, level) in &reply.approach {
        let e = check(e, "approach")?;
        let level = ApproachLevel::from_percent(level)
            .ok_or_else(|| ProtocolError::Malformed(format!("approach level {level}")))?;
        snap.approach.raise(e, level);
    }
    snap.cmp_log = reply.cmps.clone();
    for &b in &reply.bugs {
        let bug = BugId::new(target, &format!("bug{b}"));
        if !snap.bugs.contains(&bug) {
            snap.bugs.push(bug);
        }
    }
    snap.exec_status = match reply.status {
        0 => ExecStatus::Ok,
        1 => ExecStatus::Crash,
        _ => ExecStatus::Timeout,
    };
    Ok(snap)
}

struct Running {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    replies: Receiver<Result<WireReply, ProtocolError>>,
}

impl Running {
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Adapter around one persistent child. Not meant to be shared for
/// parallelism; use one adapter per worker.
pub struct SubprocessTarget {
    name: String,
    path: PathBuf,
    args: Vec<String>,
    max_len: usize,
    timeout: Duration,
    registry: EdgeRegistry,
    running: Mutex<Option<Running>>,
}

impl std::fmt::Debug for SubprocessTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubprocessTarget")
            .field("path", &self.path)
            .field("args", &self.args)
            .finish()
    }
}

impl SubprocessTarget {
    pub fn new(path: &Path, args: Vec<String>, max_len: usize) -> Result<Self, TargetError> {
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let registry = EdgeRegistry::hashed(RegistryId::for_name(&format!("exec:{name}")), HASHED_BITMAP_SIZE);
        let t = SubprocessTarget {
            name,
            path: path.to_path_buf(),
            args,
            max_len,
            timeout: DEFAULT_TIMEOUT,
            registry,
            running: Mutex::new(None),
        };
        // Fail early on a missing binary.
        let r = t.spawn()?;
        *t.running.lock().expect("poisoned") = Some(r);
        Ok(t)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn registry(&self) -> &EdgeRegistry {
        &self.registry
    }

    /// Edge id the way the child computes it.
    pub fn hashed_edge(&self, prev: u32, cur: u32) -> EdgeId {
        self.registry
            .lookup(BlockId(prev), BlockId(cur))
            .expect("hashed lookup is total")
    }

    fn spawn(&self) -> Result<Running, TargetError> {
        let mut child = Command::new(&self.path)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|source| TargetError::Spawn {
                path: self.path.display().to_string(),
                source,
            })?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut r = BufReader::new(stdout);
            loop {
                let reply = read_reply(&mut r);
                let stop = reply.is_err();
                if tx.send(reply).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Running {
            child,
            stdin,
            replies: rx,
        })
    }

    fn faulted(&self, status: ExecStatus) -> CoverageSnapshot {
        let mut s = CoverageSnapshot::empty(self.registry.id());
        s.exec_status = status;
        s
    }
}

impl Drop for SubprocessTarget {
    fn drop(&mut self) {
        if let Ok(mut g) = self.running.lock() {
            if let Some(r) = g.take() {
                r.kill();
            }
        }
    }
}

impl TargetProgram for SubprocessTarget {
    fn name(&self) -> &str {
        &self.name
    }

    fn registry_id(&self) -> RegistryId {
        self.registry.id()
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn run(&self, bytes: &[u8]) -> Result<CoverageSnapshot, TargetError> {
        let mut guard = self.running.lock().expect("poisoned");
        let mut running = match guard.take() {
            Some(r) => r,
            None => self.spawn()?,
        };
        if write_request(&mut running.stdin, bytes).is_err() {
            // Child already gone; report the crash and respawn next time.
            running.kill();
            return Ok(self.faulted(ExecStatus::Crash));
        }
        match running.replies.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => match reply_to_snapshot(&reply, self.registry.id(), &self.name) {
                Ok(snap) => {
                    *guard = Some(running);
                    Ok(snap)
                }
                Err(e) => {
                    running.kill();
                    Err(TargetError::Protocol(e.to_string()))
                }
            },
            Ok(Err(ProtocolError::Truncated)) | Err(RecvTimeoutError::Disconnected) => {
                running.kill();
                Ok(self.faulted(ExecStatus::Crash))
            }
            Ok(Err(e)) => {
                running.kill();
                Err(TargetError::Protocol(e.to_string()))
            }
            Err(RecvTimeoutError::Timeout) => {
                running.kill();
                Ok(self.faulted(ExecStatus::Timeout))
            }
        }
    }
}

/// Behaviours of the bundled reference child.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildMode {
    /// Conforming child: one edge for any input.
    Echo,
    /// Answers with a partial reply and exits.
    Truncate,
    /// Sends an impossible edge count.
    Malformed,
    /// Never answers.
    Hang,
}

impl std::str::FromStr for ChildMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo" => Ok(ChildMode::Echo),
            "truncate" => Ok(ChildMode::Truncate),
            "malformed" => Ok(ChildMode::Malformed),
            "hang" => Ok(ChildMode::Hang),
            _ => Err(format!("unknown child mode `{s}`")),
        }
    }
}

/// The one edge the echo child reports: block 0 to block 1.
pub const ECHO_EDGE: u32 = 1;

/// Serves requests from `input` until it closes.
pub fn reference_child(mode: ChildMode, input: &mut impl Read, output: &mut impl Write) -> io::Result<()> {
    while let Some(req) = read_request(input, DEFAULT_MAX_LEN)? {
        match mode {
            ChildMode::Echo => {
                let edge = (0u32 >> 1) ^ 1;
                let mut reply = WireReply {
                    status: 0,
                    edges: vec![edge],
                    ctx: vec![edge],
                    approach: vec![(edge, 100)],
                    ..WireReply::default()
                };
                if req.len() >= 2 {
                    if let Some(c) = CmpObservation::new(&req[..2], b"OK", false) {
                        reply.cmps.push(c);
                    }
                }
                write_reply(output, &reply)?;
            }
            ChildMode::Truncate => {
                output.write_all(&[0u8, 3, 0, 0, 0, 1, 0])?;
                output.flush()?;
                return Ok(());
            }
            ChildMode::Malformed => {
                output.write_all(&[0u8, 0xff, 0xff, 0xff, 0xff])?;
                output.flush()?;
            }
            ChildMode::Hang => loop {
                thread::sleep(Duration::from_secs(3600));
            },
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_reply_is_distinguished_from_malformed() {
        let mut short: &[u8] = &[0, 2, 0, 0, 0, 1, 0, 0, 0];
        assert!(matches!(read_reply(&mut short), Err(ProtocolError::Truncated)));
        let mut huge: &[u8] = &[0, 0xff, 0xff, 0xff, 0xff];
        assert!(matches!(read_reply(&mut huge), Err(ProtocolError::Malformed(_))));
        let mut bad_status: &[u8] = &[9];
        assert!(matches!(read_reply(&mut bad_status), Err(ProtocolError::Malformed(_))));
    }

    #[test]
    fn echo_child_in_memory() {
        let mut req = Vec::new();
        write_request(&mut req, b"OK!").unwrap();
        let mut out = Vec::new();
        reference_child(ChildMode::Echo, &mut req.as_slice(), &mut out).unwrap();
        let reply = read_reply(&mut out.as_slice()).unwrap();
        assert_eq!(reply.edges, vec![ECHO_EDGE]);
        assert_eq!(reply.cmps.len(), 1);
        let snap = reply_to_snapshot(&reply, RegistryId(0), "echo").unwrap();
        assert_eq!(snap.edge.iter().collect::<Vec<_>>(), vec![EdgeId(ECHO_EDGE)]);
    }

    #[test]
    fn out_of_bitmap_ids_are_rejected() {
        let reply = WireReply {
            edges: vec![HASHED_BITMAP_SIZE],
            ..WireReply::default()
        };
        assert!(reply_to_snapshot(&reply, RegistryId(0), "x").is_err());
    }

    fn arb_reply() -> impl Strategy<Value = WireReply> {
        let cmp = (prop_oneof![Just(2usize), Just(4), Just(8)], any::<bool>(), any::<u64>(), any::<u64>())
            .prop_map(|(w, c, a, b)| CmpObservation {
                width: w as u8,
                lhs: a.to_le_bytes()[..w].to_vec(),
                rhs: b.to_le_bytes()[..w].to_vec(),
                lhs_is_constant: c,
            });
        (
            0u8..3,
            proptest::collection::vec(0u32..65536, 0..20),
            proptest::collection::vec(any::<u32>(), 0..20),
            proptest::collection::vec((0u32..65536, prop_oneof![Just(0u8), Just(50), Just(100)]), 0..20),
            proptest::collection::vec(cmp, 0..5),
            proptest::collection::vec(any::<u32>(), 0..4),
        )
            .prop_map(|(status, edges, ctx, approach, cmps, bugs)| WireReply {
                status,
                edges,
                ctx,
                approach,
                cmps,
                bugs,
            })
    }

    proptest! {
        #[test]
        fn reply_encoding_round_trips(reply in arb_reply()) {
            let mut buf = Vec::new();
            write_reply(&mut buf, &reply).unwrap();
            let back = read_reply(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, reply);
        }
    }
}
