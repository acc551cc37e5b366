//! A larger variant of `ctx_demo`: one record checker shared by four call
//! sites. Once any record satisfies a check, the edge is covered for all of
//! them; only the call-trace bitmap tells the records apart.
//!
//! Input layout: up to four 3-byte records `[tag, a, b]`.
//!
//! ```text
//! check(tag, a, b, slot):
//!   if tag == 'K':
//!     if a < 16:
//!       if b == 0x42:
//!         if slot == 3: bug "slot3_overflow"
//!         inner(a)              ; nested call site
//!     else if a > 0xf0: ...
//! inner(a):
//!   if a == 7: bug "inner_a7"
//! ```

use crate::coverage::{Branch, CallSiteId, CoverageError, EdgeId, GraphBuilder, StaticGraph, Tracer};

use super::Program;

const RECORDS: usize = 4;

pub(crate) struct CtxExt {
    graph: StaticGraph,
    entry: EdgeId,
    record: [Branch; RECORDS],
    sites: [CallSiteId; RECORDS],
    check_entry: EdgeId,
    tag_ok: Branch,
    a_small: Branch,
    b_key: Branch,
    a_big: Branch,
    inner_site: CallSiteId,
    inner_entry: EdgeId,
    inner_a7: Branch,
}

impl CtxExt {
    pub(crate) fn new() -> Result<Self, CoverageError> {
        let mut b = GraphBuilder::new("ctx_ext", 256);
        let entry = b.edge("main.entry")?;
        let record = [
            b.branch("main.rec0")?,
            b.branch("main.rec1")?,
            b.branch("main.rec2")?,
            b.branch("main.rec3")?,
        ];
        let sites = [
            b.call_site("main.call0"),
            b.call_site("main.call1"),
            b.call_site("main.call2"),
            b.call_site("main.call3"),
        ];
        Ok(CtxExt {
            entry,
            record,
            sites,
            check_entry: b.edge("check.entry")?,
            tag_ok: b.branch("check.tag_k")?,
            a_small: b.branch("check.a_lt_16")?,
            b_key: b.branch("check.b_eq_42")?,
            a_big: b.branch("check.a_gt_f0")?,
            inner_site: b.call_site("check.inner"),
            inner_entry: b.edge("inner.entry")?,
            inner_a7: b.branch("inner.a_eq_7")?,
            graph: b.finish(),
        })
    }

    fn check(&self, t: &mut Tracer<'_>, rec: &[u8], slot: usize) {
        t.hit(self.check_entry);
        let (tag, a, bb) = (rec[0], rec[1], rec[2]);
        if !t.branch(self.tag_ok, tag == b'K') {
            return;
        }
        if t.branch(self.a_small, a < 16) {
            if t.branch(self.b_key, bb == 0x42) {
                if slot == 3 {
                    t.bug("slot3_overflow");
                }
                t.call(self.inner_site, |t| self.inner(t, a));
            }
        } else {
            t.branch(self.a_big, a > 0xf0);
        }
    }

    fn inner(&self, t: &mut Tracer<'_>, a: u8) {
        t.hit(self.inner_entry);
        if t.branch(self.inner_a7, a == 7) {
            t.bug("inner_a7");
        }
    }
}

impl Program for CtxExt {
    fn graph(&self) -> &StaticGraph {
        &self.graph
    }

    fn run(&self, t: &mut Tracer<'_>, input: &[u8]) {
        t.hit(self.entry);
        for slot in 0..RECORDS {
            let end = 3 * (slot + 1);
            if !t.branch(self.record[slot], input.len() >= end) {
                break;
            }
            let rec = &input[end - 3..end];
            t.call(self.sites[slot], |t| self.check(t, rec, slot));
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::targets::{builtin, TargetProgram};

    #[test]
    fn same_record_in_different_slots_differs_only_by_context() {
        let t = builtin("ctx_ext").unwrap();
        let first = t.run(&[b'K', 1, 0x42, 0, 0, 0, 0, 0, 0]).unwrap();
        let second = t.run(&[0, 0, 0, b'K', 1, 0x42, 0, 0, 0]).unwrap();
        assert_eq!(first.edge, second.edge);
        assert_ne!(first.ctx, second.ctx);
    }

    #[test]
    fn bugs() {
        let t = builtin("ctx_ext").unwrap();
        let mut input = vec![0u8; 12];
        input[9..12].copy_from_slice(&[b'K', 7, 0x42]);
        let labels: Vec<_> = t
            .run(&input)
            .unwrap()
            .bugs
            .into_iter()
            .map(|b| b.label)
            .collect();
        assert_eq!(labels, vec!["slot3_overflow", "inner_a7"]);
    }
}
