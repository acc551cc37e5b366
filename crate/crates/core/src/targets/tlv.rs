//! Two parsers of the same ELF-like type/length/value container.
//!
//! ```text
//! 0..4   magic 7f 'T' 'L' 'V'
//! 4      version, 1 or 2
//! 5      section count, 1..=6
//! 6..    sections: [type u8][len u8][payload; len]
//!
//! type 1 strtab  payload non-empty and NUL terminated
//! type 2 symtab  len a non-zero multiple of 4; entry[0] == 0 marks a null symbol
//! type 3 note    u16 tag "GN", then u32 note type 3; version 2 notes are buggy
//! type 4 dyn     u32 value 0xdeadbeef is buggy
//! type 5 rela    payload sum == 0x5a; with len > 8 it is buggy
//! ```
//!
//! `tlv_a` parses in a single forward loop. `tlv_b` first scans the section
//! table, validates the version afterwards and dispatches each section to a
//! handler through its own call site. Same format, different code.

use crate::coverage::{Branch, CallSiteId, CoverageError, EdgeId, GraphBuilder, StaticGraph, Tracer};

use super::Program;

pub const TLV_MAGIC: [u8; 4] = [0x7f, b'T', b'L', b'V'];
const NOTE_TAG: [u8; 2] = *b"GN";
const NOTE_TYPE: [u8; 4] = 3u32.to_le_bytes();
const DYN_MAGIC: [u8; 4] = 0xdead_beefu32.to_le_bytes();
const MAX_SECTIONS: u8 = 6;

pub(crate) struct TlvA {
    graph: StaticGraph,
    entry: EdgeId,
    long_enough: Branch,
    magic: Branch,
    version: Branch,
    count: Branch,
    more: Branch,
    header_fits: Branch,
    payload_fits: Branch,
    ty: [Branch; 5],
    str_nul: Branch,
    sym_aligned: Branch,
    sym_null: Branch,
    note_len: Branch,
    note_tag: Branch,
    note_type: Branch,
    note_v2: Branch,
    dyn_len: Branch,
    dyn_value: Branch,
    rela_sum: Branch,
    rela_long: Branch,
    complete: Branch,
}

impl TlvA {
    pub(crate) fn new() -> Result<Self, CoverageError> {
        let mut b = GraphBuilder::new("tlv_a", 256);
        Ok(TlvA {
            entry: b.edge("a.entry")?,
            long_enough: b.branch("a.len_ge_6")?,
            magic: b.branch("a.magic")?,
            version: b.branch("a.version_ok")?,
            count: b.branch("a.count_ok")?,
            more: b.branch("a.loop")?,
            header_fits: b.branch("a.sec_header_fits")?,
            payload_fits: b.branch("a.sec_payload_fits")?,
            ty: [
                b.branch("a.type_strtab")?,
                b.branch("a.type_symtab")?,
                b.branch("a.type_note")?,
                b.branch("a.type_dyn")?,
                b.branch("a.type_rela")?,
            ],
            str_nul: b.branch("a.strtab_nul")?,
            sym_aligned: b.branch("a.symtab_aligned")?,
            sym_null: b.branch("a.symtab_null")?,
            note_len: b.branch("a.note_len")?,
            note_tag: b.branch("a.note_tag")?,
            note_type: b.branch("a.note_type")?,
            note_v2: b.branch("a.note_v2")?,
            dyn_len: b.branch("a.dyn_len")?,
            dyn_value: b.branch("a.dyn_value")?,
            rela_sum: b.branch("a.rela_sum")?,
            rela_long: b.branch("a.rela_long")?,
            complete: b.branch("a.all_sections")?,
            graph: b.finish(),
        })
    }
}

impl Program for TlvA {
    fn graph(&self) -> &StaticGraph {
        &self.graph
    }

    fn run(&self, t: &mut Tracer<'_>, input: &[u8]) {
        t.hit(self.entry);
        if !t.branch(self.long_enough, input.len() >= 6) {
            return;
        }
        if !t.cmp_eq(self.magic, &input[0..4], &TLV_MAGIC, false) {
            return;
        }
        let version = input[4];
        if !t.branch(self.version, version == 1 || version == 2) {
            return;
        }
        let count = input[5];
        if !t.branch(self.count, (1..=MAX_SECTIONS).contains(&count)) {
            return;
        }
        let mut pos = 6;
        let mut parsed = 0;
        while t.branch(self.more, parsed < count) {
            if !t.branch(self.header_fits, pos + 2 <= input.len()) {
                break;
            }
            let (ty, len) = (input[pos], input[pos + 1] as usize);
            let start = pos + 2;
            if !t.branch(self.payload_fits, start + len <= input.len()) {
                break;
            }
            let p = &input[start..start + len];
            if t.branch(self.ty[0], ty == 1) {
                t.branch(self.str_nul, p.last() == Some(&0));
            } else if t.branch(self.ty[1], ty == 2) {
                if t.branch(self.sym_aligned, len > 0 && len % 4 == 0) {
                    t.branch(self.sym_null, p[0] == 0);
                }
            } else if t.branch(self.ty[2], ty == 3) {
                if t.branch(self.note_len, len >= 6)
                    && t.cmp_eq(self.note_tag, &p[0..2], &NOTE_TAG, false)
                    && t.cmp_eq(self.note_type, &p[2..6], &NOTE_TYPE, false)
                    && t.branch(self.note_v2, version == 2)
                {
                    t.bug("note_v2");
                }
            } else if t.branch(self.ty[3], ty == 4) {
                if t.branch(self.dyn_len, len >= 4)
                    && t.cmp_eq(self.dyn_value, &p[0..4], &DYN_MAGIC, false)
                {
                    t.bug("dyn_deadbeef");
                }
            } else if t.branch(self.ty[4], ty == 5) {
                let sum = p.iter().fold(0u8, |a, &x| a.wrapping_add(x));
                if t.branch(self.rela_sum, sum == 0x5a) && t.branch(self.rela_long, len > 8) {
                    t.bug("rela_overflow");
                }
            }
            pos = start + len;
            parsed += 1;
        }
        t.branch(self.complete, parsed == count);
    }
}

pub(crate) struct TlvB {
    graph: StaticGraph,
    entry: EdgeId,
    header: Branch,
    magic: Branch,
    scan_more: Branch,
    scan_fits: Branch,
    truncated: Branch,
    version1: Branch,
    version2: Branch,
    count_zero: Branch,
    count_big: Branch,
    dispatch: [Branch; 5],
    sites: [CallSiteId; 5],
    str_empty: Branch,
    str_nul: Branch,
    sym_len: Branch,
    sym_null: Branch,
    note_short: Branch,
    note_sig: Branch,
    note_kind: Branch,
    note_v2: Branch,
    dyn_short: Branch,
    dyn_value: Branch,
    rela_long: Branch,
    rela_sum: Branch,
}

impl TlvB {
    pub(crate) fn new() -> Result<Self, CoverageError> {
        let mut b = GraphBuilder::new("tlv_b", 256);
        Ok(TlvB {
            entry: b.edge("b.entry")?,
            header: b.branch("b.header_present")?,
            magic: b.branch("b.magic")?,
            scan_more: b.branch("b.scan_loop")?,
            scan_fits: b.branch("b.scan_fits")?,
            truncated: b.branch("b.truncated")?,
            version1: b.branch("b.version_1")?,
            version2: b.branch("b.version_2")?,
            count_zero: b.branch("b.count_zero")?,
            count_big: b.branch("b.count_big")?,
            dispatch: [
                b.branch("b.dispatch_strtab")?,
                b.branch("b.dispatch_symtab")?,
                b.branch("b.dispatch_note")?,
                b.branch("b.dispatch_dyn")?,
                b.branch("b.dispatch_rela")?,
            ],
            sites: [
                b.call_site("call_strtab"),
                b.call_site("call_symtab"),
                b.call_site("call_note"),
                b.call_site("call_dyn"),
                b.call_site("call_rela"),
            ],
            str_empty: b.branch("b.strtab_empty")?,
            str_nul: b.branch("b.strtab_nul")?,
            sym_len: b.branch("b.symtab_len")?,
            sym_null: b.branch("b.symtab_null")?,
            note_short: b.branch("b.note_short")?,
            note_sig: b.branch("b.note_sig")?,
            note_kind: b.branch("b.note_kind")?,
            note_v2: b.branch("b.note_v2")?,
            dyn_short: b.branch("b.dyn_short")?,
            dyn_value: b.branch("b.dyn_value")?,
            rela_long: b.branch("b.rela_long")?,
            rela_sum: b.branch("b.rela_sum")?,
            graph: b.finish(),
        })
    }

    /// Section table as `(type, payload)` pairs; `None` when the table runs
    /// past the end of the input.
    fn scan<'i>(
        &self,
        t: &mut Tracer<'_>,
        input: &'i [u8],
        count: u8,
    ) -> Option<Vec<(u8, &'i [u8])>> {
        let mut table = Vec::new();
        let mut pos = 6;
        while t.branch(self.scan_more, table.len() < count as usize) {
            let fits = pos + 2 <= input.len() && pos + 2 + input[pos + 1] as usize <= input.len();
            if !t.branch(self.scan_fits, fits) {
                return None;
            }
            let len = input[pos + 1] as usize;
            table.push((input[pos], &input[pos + 2..pos + 2 + len]));
            pos += 2 + len;
        }
        Some(table)
    }

    fn strtab(&self, t: &mut Tracer<'_>, p: &[u8]) {
        if !t.branch(self.str_empty, p.is_empty()) {
            t.branch(self.str_nul, p[p.len() - 1] == 0);
        }
    }

    fn symtab(&self, t: &mut Tracer<'_>, p: &[u8]) {
        if t.branch(self.sym_len, !p.is_empty() && p.len() % 4 == 0) {
            t.branch(self.sym_null, p[0] == 0);
        }
    }

    fn note(&self, t: &mut Tracer<'_>, p: &[u8], version: u8) {
        if t.branch(self.note_short, p.len() < 6) {
            return;
        }
        if !t.cmp_eq(self.note_sig, &NOTE_TAG, &p[0..2], true) {
            return;
        }
        if t.cmp_eq(self.note_kind, &NOTE_TYPE, &p[2..6], true)
            && t.branch(self.note_v2, version == 2)
        {
            t.bug("note_v2");
        }
    }

    fn dynamic(&self, t: &mut Tracer<'_>, p: &[u8]) {
        if t.branch(self.dyn_short, p.len() < 4) {
            return;
        }
        if t.cmp_eq(self.dyn_value, &DYN_MAGIC, &p[0..4], true) {
            t.bug("dyn_deadbeef");
        }
    }

    fn rela(&self, t: &mut Tracer<'_>, p: &[u8]) {
        let long = t.branch(self.rela_long, p.len() > 8);
        let sum = p.iter().fold(0u8, |a, &x| a.wrapping_add(x));
        if t.branch(self.rela_sum, sum == 0x5a) && long {
            t.bug("rela_overflow");
        }
    }
}

impl Program for TlvB {
    fn graph(&self) -> &StaticGraph {
        &self.graph
    }

    fn run(&self, t: &mut Tracer<'_>, input: &[u8]) {
        t.hit(self.entry);
        if !t.branch(self.header, input.len() >= 6) {
            return;
        }
        if !t.cmp_eq(self.magic, &TLV_MAGIC, &input[0..4], true) {
            return;
        }
        let count = input[5];
        if t.branch(self.count_zero, count == 0) || t.branch(self.count_big, count > MAX_SECTIONS)
        {
            return;
        }
        let table = self.scan(t, input, count);
        if t.branch(self.truncated, table.is_none()) {
            return;
        }
        let version = input[4];
        if !t.branch(self.version1, version == 1) && !t.branch(self.version2, version == 2) {
            return;
        }
        for (ty, p) in table.unwrap_or_default() {
            let handled = (1..=5u8).find(|&k| t.branch(self.dispatch[k as usize - 1], ty == k));
            let Some(k) = handled else { continue };
            let site = self.sites[k as usize - 1];
            t.call(site, |t| match k {
                1 => self.strtab(t, p),
                2 => self.symtab(t, p),
                3 => self.note(t, p, version),
                4 => self.dynamic(t, p),
                _ => self.rela(t, p),
            });
        }
    }
}
