//! Two tag-balancing parsers of the same angle-bracket format.
//!
//! ```text
//! "<!--" ... "-->"   comment; unterminated comments are buggy
//! "<x>"              open tag, x in a..=z; a fifth nested level is buggy
//! "</x>"             close tag; closing with an empty stack is buggy,
//!                    closing the wrong tag stops the parse
//! anything else      text
//! ```
//!
//! `xmlish_a` runs an explicit stack in one loop, `xmlish_b` is a recursive
//! descent parser (one call site per nesting step).

use crate::coverage::{Branch, CallSiteId, CoverageError, EdgeId, GraphBuilder, StaticGraph, Tracer};

use super::Program;

const COMMENT_OPEN: [u8; 4] = *b"<!--";
const MAX_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Token {
    Open(u8),
    Close(u8),
    Comment { terminated: bool },
    Text,
}

/// Token at `pos` and its length. Shared by both parsers: they agree on the
/// lexical structure and differ in how they walk it.
fn lex(input: &[u8], pos: usize) -> (Token, usize) {
    let rest = &input[pos..];
    if rest.starts_with(&COMMENT_OPEN) {
        return match rest[4..].windows(3).position(|w| w == b"-->") {
            Some(i) => (Token::Comment { terminated: true }, 4 + i + 3),
            None => (Token::Comment { terminated: false }, rest.len()),
        };
    }
    match rest {
        [b'<', b'/', c, b'>', ..] if c.is_ascii_lowercase() => (Token::Close(*c), 4),
        [b'<', c, b'>', ..] if c.is_ascii_lowercase() => (Token::Open(*c), 3),
        _ => (Token::Text, 1),
    }
}

pub(crate) struct XmlishA {
    graph: StaticGraph,
    entry: EdgeId,
    starts_lt: Branch,
    more: Branch,
    comment: Branch,
    terminated: Branch,
    is_open: Branch,
    too_deep: Branch,
    is_close: Branch,
    underflow: Branch,
    matches: Branch,
    text_lt: Branch,
    balanced: Branch,
}

impl XmlishA {
    pub(crate) fn new() -> Result<Self, CoverageError> {
        let mut b = GraphBuilder::new("xmlish_a", 256);
        Ok(XmlishA {
            entry: b.edge("a.entry")?,
            starts_lt: b.branch("a.starts_lt")?,
            more: b.branch("a.loop")?,
            comment: b.branch("a.comment")?,
            terminated: b.branch("a.comment_terminated")?,
            is_open: b.branch("a.open")?,
            too_deep: b.branch("a.too_deep")?,
            is_close: b.branch("a.close")?,
            underflow: b.branch("a.underflow")?,
            matches: b.branch("a.close_matches")?,
            text_lt: b.branch("a.text_lt")?,
            balanced: b.branch("a.balanced")?,
            graph: b.finish(),
        })
    }
}

impl Program for XmlishA {
    fn graph(&self) -> &StaticGraph {
        &self.graph
    }

    fn run(&self, t: &mut Tracer<'_>, input: &[u8]) {
        t.hit(self.entry);
        if !t.branch(self.starts_lt, input[0] == b'<') {
            return;
        }
        let mut stack: Vec<u8> = Vec::new();
        let mut pos = 0;
        while t.branch(self.more, pos < input.len()) {
            let window = input.get(pos..pos + 4);
            if let Some(w) = window {
                t.cmp_eq(self.comment, w, &COMMENT_OPEN, false);
            }
            let (tok, len) = lex(input, pos);
            match tok {
                Token::Comment { terminated } => {
                    if !t.branch(self.terminated, terminated) {
                        t.bug("unterminated_comment");
                        return;
                    }
                }
                _ if t.branch(self.is_open, matches!(tok, Token::Open(_))) => {
                    let Token::Open(c) = tok else { unreachable!() };
                    if t.branch(self.too_deep, stack.len() == MAX_DEPTH) {
                        t.bug("deep_nesting");
                        return;
                    }
                    stack.push(c);
                }
                _ if t.branch(self.is_close, matches!(tok, Token::Close(_))) => {
                    let Token::Close(c) = tok else { unreachable!() };
                    if t.branch(self.underflow, stack.is_empty()) {
                        t.bug("stack_underflow");
                        return;
                    }
                    if !t.branch(self.matches, stack.last() == Some(&c)) {
                        return;
                    }
                    stack.pop();
                }
                _ => {
                    t.branch(self.text_lt, input[pos] == b'<');
                }
            }
            pos += len;
        }
        t.branch(self.balanced, stack.is_empty());
    }
}

pub(crate) struct XmlishB {
    graph: StaticGraph,
    entry: EdgeId,
    empty_doc: Branch,
    root_lt: Branch,
    element_site: CallSiteId,
    element_entry: EdgeId,
    depth_limit: Branch,
    seq_end: Branch,
    seq_comment: Branch,
    comment_open: Branch,
    comment_bad: Branch,
    seq_close: Branch,
    close_expected: Branch,
    close_stray: Branch,
    seq_open: Branch,
    leftover: Branch,
}

/// Outcome of parsing one element's content.
enum Flow {
    Continue(usize),
    Stop,
}

impl XmlishB {
    pub(crate) fn new() -> Result<Self, CoverageError> {
        let mut b = GraphBuilder::new("xmlish_b", 256);
        Ok(XmlishB {
            entry: b.edge("b.entry")?,
            empty_doc: b.branch("b.empty")?,
            root_lt: b.branch("b.root_lt")?,
            element_site: b.call_site("element"),
            element_entry: b.edge("b.element.entry")?,
            depth_limit: b.branch("b.element.depth_limit")?,
            seq_end: b.branch("b.seq.end")?,
            seq_comment: b.branch("b.seq.comment")?,
            comment_open: b.branch("b.seq.comment_cmp")?,
            comment_bad: b.branch("b.seq.comment_unterminated")?,
            seq_close: b.branch("b.seq.close")?,
            close_expected: b.branch("b.seq.close_expected")?,
            close_stray: b.branch("b.seq.close_stray")?,
            seq_open: b.branch("b.seq.open")?,
            leftover: b.branch("b.leftover_open")?,
            graph: b.finish(),
        })
    }

    /// Parses a sequence of siblings starting at `pos` inside `open` (`None`
    /// at top level). On success returns the position after the matching
    /// close tag, or the end of input.
    fn sequence(
        &self,
        t: &mut Tracer<'_>,
        input: &[u8],
        mut pos: usize,
        open: Option<u8>,
        depth: usize,
        unclosed: &mut bool,
    ) -> Flow {
        loop {
            if t.branch(self.seq_end, pos >= input.len()) {
                if open.is_some() {
                    *unclosed = true;
                }
                return Flow::Continue(pos);
            }
            if let Some(w) = input.get(pos..pos + 4) {
                t.cmp_eq(self.comment_open, &COMMENT_OPEN, w, true);
            }
            let (tok, len) = lex(input, pos);
            if t.branch(self.seq_comment, matches!(tok, Token::Comment { .. })) {
                if t.branch(self.comment_bad, tok == (Token::Comment { terminated: false })) {
                    t.bug("unterminated_comment");
                    return Flow::Stop;
                }
            } else if t.branch(self.seq_close, matches!(tok, Token::Close(_))) {
                let Token::Close(c) = tok else { unreachable!() };
                return match open {
                    Some(o) if t.branch(self.close_expected, o == c) => Flow::Continue(pos + len),
                    Some(_) => Flow::Stop,
                    None => {
                        t.branch(self.close_stray, true);
                        t.bug("stack_underflow");
                        Flow::Stop
                    }
                };
            } else if t.branch(self.seq_open, matches!(tok, Token::Open(_))) {
                let Token::Open(c) = tok else { unreachable!() };
                let site = self.element_site;
                let flow = t.call(site, |t| self.element(t, input, pos + len, c, depth + 1, unclosed));
                match flow {
                    Flow::Continue(next) => {
                        pos = next;
                        continue;
                    }
                    Flow::Stop => return Flow::Stop,
                }
            }
            pos += len;
        }
    }

    fn element(
        &self,
        t: &mut Tracer<'_>,
        input: &[u8],
        pos: usize,
        tag: u8,
        depth: usize,
        unclosed: &mut bool,
    ) -> Flow {
        t.hit(self.element_entry);
        if t.branch(self.depth_limit, depth > MAX_DEPTH) {
            t.bug("deep_nesting");
            return Flow::Stop;
        }
        self.sequence(t, input, pos, Some(tag), depth, unclosed)
    }
}

impl Program for XmlishB {
    fn graph(&self) -> &StaticGraph {
        &self.graph
    }

    fn run(&self, t: &mut Tracer<'_>, input: &[u8]) {
        t.hit(self.entry);
        if t.branch(self.empty_doc, input.is_empty()) || !t.branch(self.root_lt, input[0] == b'<')
        {
            return;
        }
        let mut unclosed = false;
        if let Flow::Continue(_) = self.sequence(t, input, 0, None, 0, &mut unclosed) {
            t.branch(self.leftover, unclosed);
        }
    }
}
