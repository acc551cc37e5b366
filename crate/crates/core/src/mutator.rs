//! Candidate generation: hot-byte selection, exhaustive byte enumeration,
//! comparison-operand copying, and the random flips used by the baseline.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mtnn::SaliencyMap;
use crate::targets::{CmpObservation, TestInput};

pub const DEFAULT_TOP_K: usize = 1024;

/// Default cap on executions spent on mutations in one round.
pub const DEFAULT_ROUND_BUDGET: usize = 50_000;

/// Byte offsets chosen for enumeration, highest saliency first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HotByteSet {
    pub positions: Vec<usize>,
}

impl HotByteSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// The `min(k, seed_len)` offsets below `seed_len` with the largest scores,
/// ordered by descending score and then ascending offset. A `k` of zero
/// selects nothing.
pub fn top_k(s: &SaliencyMap, seed_len: usize, k: usize) -> HotByteSet {
    let n = seed_len.min(s.scores.len());
    let mut idx: Vec<usize> = (0..n).collect();
    // total_cmp keeps the order total even if a NaN slips in.
    idx.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    HotByteSet { positions: idx }
}

/// Every single-byte variant of `seed` at `hot` positions: 255 per offset,
/// values in ascending order, the seed's own value skipped.
pub fn enumerate_mutations<'a>(seed: &'a TestInput, hot: &'a HotByteSet) -> Enumeration<'a> {
    Enumeration {
        seed,
        positions: &hot.positions,
        pos: 0,
        value: 0,
    }
}

/// Lazy stream returned by [`enumerate_mutations`].
#[derive(Debug, Clone)]
pub struct Enumeration<'a> {
    seed: &'a TestInput,
    positions: &'a [usize],
    pos: usize,
    value: u16,
}

impl Iterator for Enumeration<'_> {
    type Item = TestInput;

    fn next(&mut self) -> Option<TestInput> {
        loop {
            let &p = self.positions.get(self.pos)?;
            if p >= self.seed.bytes.len() || self.value > 255 {
                self.pos += 1;
                self.value = 0;
                continue;
            }
            let v = self.value as u8;
            self.value += 1;
            if v == self.seed.bytes[p] {
                continue;
            }
            let mut bytes = self.seed.bytes.clone();
            bytes[p] = v;
            return Some(self.seed.derive(bytes, format!("enum:{p}={v:02x}")));
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left: usize = self.positions[self.pos.min(self.positions.len())..]
            .iter()
            .filter(|&&p| p < self.seed.bytes.len())
            .count()
            * 255;
        (0, Some(left))
    }
}

fn occurrences(hay: &[u8], needle: &[u8]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    hay.windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle)
        .map(|(i, _)| i)
        .collect()
}

/// For every comparison, finds the variable operand in the seed (as logged
/// and byte-reversed) and writes the constant over it in the same byte order.
/// Variants equal to the seed or to an earlier variant are dropped.
pub fn direct_copy(seed: &TestInput, log: &[CmpObservation]) -> Vec<TestInput> {
    let mut seen: BTreeSet<Vec<u8>> = BTreeSet::new();
    seen.insert(seed.bytes.clone());
    let mut out = Vec::new();
    for obs in log {
        let (constant, variable) = obs.split();
        let rev_c: Vec<u8> = constant.iter().rev().copied().collect();
        let rev_v: Vec<u8> = variable.iter().rev().copied().collect();
        let orders: [(&[u8], &[u8], &str); 2] = [(variable, constant, "le"), (&rev_v, &rev_c, "be")];
        for (needle, patch, order) in orders {
            for off in occurrences(&seed.bytes, needle) {
                let mut bytes = seed.bytes.clone();
                bytes[off..off + patch.len()].copy_from_slice(patch);
                if seen.insert(bytes.clone()) {
                    let note = format!("copy:{off}/{}{order}", obs.width);
                    out.push(seed.derive(bytes, note));
                }
            }
        }
    }
    out
}

/// Everything one seed contributes to a round: copied operands first, then
/// the enumeration over its hot bytes.
#[derive(Debug, Clone)]
pub struct MutationPlan {
    pub seed: TestInput,
    pub hot: HotByteSet,
    pub copies: Vec<TestInput>,
}

impl MutationPlan {
    pub fn new(seed: TestInput, hot: HotByteSet, log: &[CmpObservation]) -> Self {
        let copies = direct_copy(&seed, log);
        MutationPlan { seed, hot, copies }
    }

    pub fn len(&self) -> usize {
        self.copies.len() + self.hot.positions.iter().filter(|&&p| p < self.seed.len()).count() * 255
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variants(&self) -> impl Iterator<Item = TestInput> + '_ {
        self.copies.iter().cloned().chain(enumerate_mutations(&self.seed, &self.hot))
    }
}

/// Interleaves the plans one variant at a time until `budget` variants have
/// been produced or every plan is exhausted.
pub fn round_robin(plans: &[MutationPlan], budget: usize) -> Vec<TestInput> {
    let mut streams: Vec<_> = plans.iter().map(|p| p.variants()).collect();
    let mut live = vec![true; streams.len()];
    let mut out = Vec::new();
    while out.len() < budget && live.iter().any(|&l| l) {
        for (stream, alive) in streams.iter_mut().zip(live.iter_mut()) {
            if out.len() >= budget {
                break;
            }
            if !*alive {
                continue;
            }
            match stream.next() {
                Some(v) => out.push(v),
                None => *alive = false,
            }
        }
    }
    out
}

/// Replaces 1 to `max_flips` uniformly chosen bytes with different uniform
/// values.
pub fn random_flips(seed: &TestInput, rng: &mut impl Rng, max_flips: usize) -> TestInput {
    let mut bytes = seed.bytes.clone();
    let n = rng.gen_range(1..=max_flips.max(1));
    let mut note = String::from("flip");
    for _ in 0..n {
        let p = rng.gen_range(0..bytes.len());
        bytes[p] ^= rng.gen_range(1..=255u8);
        note.push_str(&format!(":{p}"));
    }
    seed.derive(bytes, note)
}

/// Uniform random bytes of uniform random length in `1..=max_len`.
pub fn random_input(rng: &mut impl Rng, max_len: usize) -> Vec<u8> {
    let len = rng.gen_range(1..=max_len.max(1));
    (0..len).map(|_| rng.gen()).collect()
}
