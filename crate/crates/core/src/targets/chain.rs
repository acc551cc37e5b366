//! Nested single-byte conditions.
//!
//! Level `i` is entered only when bytes `0..i` spell the prefix of
//! [`CHAIN_KEY`]. Each entered level also evaluates two side conditions on
//! byte `8 + i`, so the corpus gets many shallow variants next to the few
//! deep ones. Completing all eight levels reports `chain_complete`.

use crate::coverage::{Branch, CoverageError, EdgeId, GraphBuilder, StaticGraph, Tracer};

use super::Program;

pub const CHAIN_KEY: &[u8; 8] = b"cH41n!Zq";

pub(crate) struct Chain {
    graph: StaticGraph,
    entry: EdgeId,
    level: Vec<Branch>,
    side_low: Vec<Branch>,
    side_odd: Vec<Branch>,
}

impl Chain {
    pub(crate) fn new() -> Result<Self, CoverageError> {
        let mut b = GraphBuilder::new("chain", 256);
        let entry = b.edge("chain.entry")?;
        let mut level = Vec::new();
        let mut side_low = Vec::new();
        let mut side_odd = Vec::new();
        for i in 0..CHAIN_KEY.len() {
            level.push(b.branch(&format!("chain.level{i}"))?);
            side_low.push(b.branch(&format!("chain.side{i}.low"))?);
            side_odd.push(b.branch(&format!("chain.side{i}.odd"))?);
        }
        Ok(Chain {
            graph: b.finish(),
            entry,
            level,
            side_low,
            side_odd,
        })
    }
}

impl Program for Chain {
    fn graph(&self) -> &StaticGraph {
        &self.graph
    }

    fn run(&self, t: &mut Tracer<'_>, input: &[u8]) {
        t.hit(self.entry);
        for (i, &key) in CHAIN_KEY.iter().enumerate() {
            let side = input.get(8 + i).copied().unwrap_or(0);
            if t.branch(self.side_low[i], side < 0x80) {
                t.branch(self.side_odd[i], side & 1 == 1);
            }
            if !t.branch(self.level[i], input.get(i) == Some(&key)) {
                return;
            }
        }
        t.bug("chain_complete");
    }
}

#[cfg(test)]
mod tests {
    use super::CHAIN_KEY;
    use crate::targets::{builtin, TargetProgram};

    #[test]
    fn full_key_completes_the_chain() {
        let t = builtin("chain").unwrap();
        assert_eq!(t.run(CHAIN_KEY).unwrap().bugs.len(), 1);
        assert!(t.run(&CHAIN_KEY[..7]).unwrap().bugs.is_empty());
    }

    #[test]
    fn depth_grows_edge_count() {
        let t = builtin("chain").unwrap();
        let shallow = t.run(b"x").unwrap();
        let deeper = t.run(b"cH4").unwrap();
        assert!(deeper.edge.len() > shallow.edge.len());
    }
}
