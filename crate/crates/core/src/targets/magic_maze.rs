//! Eight independent bugs, each guarded by a multi-byte magic comparison at a
//! fixed offset.
//!
//! ```text
//! for i in 0..8:
//!   if len >= off[i] + W:
//!     if input[off[i]..off[i]+W] == magic[i] (little endian):
//!       bug "magic{i}"
//! ```
//!
//! Every guard is evaluated on every input long enough to hold it, so the
//! comparison log always carries the operands the input presented.

use crate::coverage::{Branch, CoverageError, EdgeId, GraphBuilder, StaticGraph, Tracer};

use super::Program;

pub const MAZE_OFFSETS: [usize; 8] = [4, 12, 20, 28, 36, 44, 52, 60];

pub const MAZE_MAGICS: [u64; 8] = [
    0x8d3f_17c2_5a9e_41b6,
    0x1e77_a0d4_c3b1_9f28,
    0x6b02_e9f5_7d48_c0a3,
    0xf4c8_5b16_29e3_7d91,
    0x3a95_d2e0_84f7_6c1b,
    0xc761_0b3f_e52a_98d4,
    0x57e2_c9a8_1f60_b437,
    0x9b1d_46f3_a0c5_e27e,
];

pub(crate) struct MagicMaze {
    graph: StaticGraph,
    width: usize,
    entry: EdgeId,
    fits: Vec<Branch>,
    guard: Vec<Branch>,
}

impl MagicMaze {
    pub(crate) fn new() -> Result<Self, CoverageError> {
        Self::with_width(4)
    }

    pub(crate) fn with_width(width: usize) -> Result<Self, CoverageError> {
        assert!(matches!(width, 2 | 4 | 8), "magic width must be 2, 4 or 8");
        let mut b = GraphBuilder::new("magic_maze", 256);
        let entry = b.edge("maze.entry")?;
        let mut fits = Vec::new();
        let mut guard = Vec::new();
        for i in 0..MAZE_OFFSETS.len() {
            fits.push(b.branch(&format!("maze.fits{i}"))?);
            guard.push(b.branch(&format!("maze.magic{i}"))?);
        }
        Ok(MagicMaze {
            graph: b.finish(),
            width,
            entry,
            fits,
            guard,
        })
    }
}

/// Little-endian bytes of magic `i` at the given width.
pub fn magic_bytes(i: usize, width: usize) -> Vec<u8> {
    MAZE_MAGICS[i].to_le_bytes()[..width].to_vec()
}

impl Program for MagicMaze {
    fn graph(&self) -> &StaticGraph {
        &self.graph
    }

    fn run(&self, t: &mut Tracer<'_>, input: &[u8]) {
        t.hit(self.entry);
        for (i, &off) in MAZE_OFFSETS.iter().enumerate() {
            if !t.branch(self.fits[i], input.len() >= off + self.width) {
                continue;
            }
            let magic = magic_bytes(i, self.width);
            let window = &input[off..off + self.width];
            if t.cmp_eq(self.guard[i], window, &magic, false) {
                t.bug(&format!("magic{i}"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_byte_variant_uses_two_byte_compares() {
        let m = MagicMaze::with_width(2).unwrap();
        let mut input = vec![0u8; 64];
        input[4..6].copy_from_slice(&magic_bytes(0, 2));
        let mut t = Tracer::new(m.graph());
        m.run(&mut t, &input);
        let snap = t.finish(crate::coverage::ExecStatus::Ok);
        assert_eq!(snap.bugs.len(), 1);
        assert!(snap.cmp_log.iter().all(|c| c.width == 2));
        assert_eq!(snap.cmp_log.len(), 8);
    }
}
