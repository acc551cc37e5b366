//! The two-call-site buffer overflow example.
//!
//! ```c
//!  1 void foo(int a, char *buf) {
//!  2     if (a)
//!  3         strncpy(buf, "hello world!", 12);
//!  4     else
//!  5         ;
//!  6 }
//!    ...
//! 12     foo(input[0], fixed16);
//! 14     foo(!input[0], malloc(input[1]));
//! ```
//!
//! `[1, 0]` takes the if-edge from line 12 and the else-edge from line 14.
//! `[0, 8]` takes them the other way round and overflows the 8-byte buffer.
//! Both inputs cover the same edges; only the call context differs. The
//! overflow is reported like a sanitizer would, without an edge of its own.

use crate::coverage::{Branch, CallSiteId, CoverageError, EdgeId, GraphBuilder, StaticGraph, Tracer};

use super::Program;

pub(crate) const BUG_LABEL: &str = "heap_overflow_line3";

pub(crate) struct CtxDemo {
    graph: StaticGraph,
    main_entry: EdgeId,
    has_two: Branch,
    foo_entry: EdgeId,
    foo_cond: Branch,
    site12: CallSiteId,
    site14: CallSiteId,
}

impl CtxDemo {
    pub(crate) fn new() -> Result<Self, CoverageError> {
        let mut b = GraphBuilder::new("ctx_demo", 64);
        let main_entry = b.edge("main.entry")?;
        let has_two = b.branch("main.len_ge_2")?;
        let foo_entry = b.edge("foo.entry")?;
        let foo_cond = b.branch("foo.if_a")?;
        let site12 = b.call_site("line12");
        let site14 = b.call_site("line14");
        Ok(CtxDemo {
            graph: b.finish(),
            main_entry,
            has_two,
            foo_entry,
            foo_cond,
            site12,
            site14,
        })
    }

    fn foo(&self, t: &mut Tracer<'_>, a: bool, buf_len: usize) {
        t.hit(self.foo_entry);
        if t.branch(self.foo_cond, a) && buf_len < 12 {
            t.bug(BUG_LABEL);
        }
    }
}

impl Program for CtxDemo {
    fn graph(&self) -> &StaticGraph {
        &self.graph
    }

    fn run(&self, t: &mut Tracer<'_>, input: &[u8]) {
        t.hit(self.main_entry);
        if !t.branch(self.has_two, input.len() >= 2) {
            return;
        }
        let a = input[0] != 0;
        let n = input[1] as usize;
        t.call(self.site12, |t| self.foo(t, a, 16));
        t.call(self.site14, |t| self.foo(t, !a, n));
    }
}
