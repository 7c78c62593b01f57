//! Listwise input assembly.
//!
//! A layout is `prefix | block_1 | ... | block_M | id_1 ... id_M` where the
//! prefix is the instruction followed by the query, each block is a
//! truncated candidate followed by `<doc_end>`, and `id_k` is the identifier
//! token of slot `k`.
//!
//! Attention permissions:
//! - prefix tokens are causal among themselves;
//! - a block token sees the prefix and the earlier tokens of its own block;
//! - an identifier sees the prefix, every block, and itself, but no other
//!   identifier.
//!
//! Positions: the prefix takes `0..P`, every block restarts at `P`, and all
//! identifiers sit at `P + L_max` where `L_max` is the longest block. Blocks
//! are therefore encoded exactly as if each were alone after the prefix, and
//! identifiers are interchangeable up to which block they belong to.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::datagen::{TokenId, Vocab, DOC_END};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("expected {expected} candidates, got {got}")]
    SlotCount { expected: usize, got: usize },
    #[error("candidate {slot} is empty")]
    EmptyCandidate { slot: usize },
    #[error("invalid layout config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutConfig {
    pub instruction: Vec<TokenId>,
    /// Cap on block length, including the trailing `<doc_end>`.
    pub max_candidate_tokens: usize,
    pub num_slots: usize,
    pub doc_end: TokenId,
    pub identifiers: Vec<TokenId>,
}

impl LayoutConfig {
    pub fn from_vocab(vocab: &Vocab, num_slots: usize, max_candidate_tokens: usize) -> crate::Result<Self> {
        let cfg = Self {
            instruction: vocab.instruction_ids(),
            max_candidate_tokens,
            num_slots,
            doc_end: DOC_END,
            identifiers: vocab.identifier_ids(num_slots)?,
        };
        cfg.validate(vocab.len())?;
        Ok(cfg)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), LayoutError> {
        let err = |m: String| Err(LayoutError::Config(m));
        if self.num_slots == 0 {
            return err("need at least one slot".into());
        }
        if self.max_candidate_tokens < 2 {
            return err("max_candidate_tokens must leave room for content and <doc_end>".into());
        }
        if self.identifiers.len() != self.num_slots {
            return err(format!(
                "{} identifier tokens for {} slots",
                self.identifiers.len(),
                self.num_slots
            ));
        }
        let mut specials = self.identifiers.clone();
        specials.push(self.doc_end);
        if specials.iter().any(|&t| t >= vocab_size) {
            return err("special token outside vocabulary".into());
        }
        specials.sort_unstable();
        specials.dedup();
        if specials.len() != self.num_slots + 1 {
            return err("special token ids must be distinct".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Prefix,
    Candidate(usize),
    Identifier(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Row-major `len x len`; `permit[i * len + j]` lets token `i` attend to token `j`.
    pub permit: Arc<Vec<bool>>,
    /// Position in the sequence of each slot's `<doc_end>`.
    pub idx_st: Vec<usize>,
    /// Position in the sequence of each slot's identifier.
    pub idx_id: Vec<usize>,
    pub prefix_len: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_slots(&self) -> usize {
        self.idx_id.len()
    }

    pub fn permits(&self, from: usize, to: usize) -> bool {
        self.permit[from * self.len() + to]
    }

    pub fn max_position(&self) -> usize {
        self.positions.iter().copied().max().unwrap_or(0)
    }
}

/// Token-level permission implied by the segment map.
fn expected_permit(segments: &[Segment], i: usize, j: usize) -> bool {
    match (segments[i], segments[j]) {
        (Segment::Prefix, Segment::Prefix) => j <= i,
        (Segment::Prefix, _) => false,
        (Segment::Candidate(_), Segment::Prefix) => true,
        (Segment::Candidate(a), Segment::Candidate(b)) => a == b && j <= i,
        (Segment::Candidate(_), Segment::Identifier(_)) => false,
        (Segment::Identifier(_), Segment::Prefix | Segment::Candidate(_)) => true,
        (Segment::Identifier(_), Segment::Identifier(_)) => i == j,
    }
}

pub fn build_layout(
    query: &[TokenId],
    candidates: &[Vec<TokenId>],
    config: &LayoutConfig,
) -> Result<SequenceLayout, LayoutError> {
    if candidates.len() != config.num_slots {
        return Err(LayoutError::SlotCount {
            expected: config.num_slots,
            got: candidates.len(),
        });
    }
    let mut tokens: Vec<TokenId> = config.instruction.iter().chain(query).copied().collect();
    let prefix_len = tokens.len();
    let mut positions: Vec<usize> = (0..prefix_len).collect();
    let mut segments = vec![Segment::Prefix; prefix_len];
    let mut idx_st = Vec::with_capacity(config.num_slots);
    let mut longest = 0;

    for (slot, cand) in candidates.iter().enumerate() {
        let keep = cand.len().min(config.max_candidate_tokens - 1);
        if keep == 0 {
            return Err(LayoutError::EmptyCandidate { slot });
        }
        for (off, &t) in cand[..keep].iter().chain(std::iter::once(&config.doc_end)).enumerate() {
            tokens.push(t);
            positions.push(prefix_len + off);
            segments.push(Segment::Candidate(slot));
        }
        idx_st.push(tokens.len() - 1);
        longest = longest.max(keep + 1);
    }

    let mut idx_id = Vec::with_capacity(config.num_slots);
    for (slot, &id) in config.identifiers.iter().enumerate() {
        idx_id.push(tokens.len());
        tokens.push(id);
        positions.push(prefix_len + longest);
        segments.push(Segment::Identifier(slot));
    }

    let n = tokens.len();
    let mut permit = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            permit[i * n + j] = expected_permit(&segments, i, j);
        }
    }
    Ok(SequenceLayout {
        tokens,
        positions,
        segments,
        permit: Arc::new(permit),
        idx_st,
        idx_id,
        prefix_len,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Shape(String),
    SlotIndexCount { st: usize, id: usize, slots: usize },
    SegmentOrder { at: usize },
    MissingDocEnd { slot: usize },
    IdentifierToken { slot: usize },
    IdentifierCrossAttention { from: usize, to: usize },
    CandidateCrossAttention { from: usize, to: usize },
    FutureAttention { from: usize, to: usize },
    MissingPermission { from: usize, to: usize },
    EmptyRow { row: usize },
    PrefixPositions,
    NonIdenticalCandidatePositions { slot: usize },
    IdentifierPosition { slot: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(m) => write!(f, "shape: {m}"),
            Violation::SlotIndexCount { st, id, slots } => {
                write!(f, "slot index count: {st} doc_end and {id} identifier positions for {slots} slots")
            }
            Violation::SegmentOrder { at } => write!(f, "segment order broken at token {at}"),
            Violation::MissingDocEnd { slot } => write!(f, "missing <doc_end> for slot {slot}"),
            Violation::IdentifierToken { slot } => write!(f, "wrong identifier token for slot {slot}"),
            Violation::IdentifierCrossAttention { from, to } => {
                write!(f, "identifier cross-attention ({from} -> {to})")
            }
            Violation::CandidateCrossAttention { from, to } => {
                write!(f, "candidate cross-attention ({from} -> {to})")
            }
            Violation::FutureAttention { from, to } => write!(f, "attention to a later segment ({from} -> {to})"),
            Violation::MissingPermission { from, to } => write!(f, "missing permission ({from} -> {to})"),
            Violation::EmptyRow { row } => write!(f, "empty attention row {row}"),
            Violation::PrefixPositions => write!(f, "prefix positions are not 0..P"),
            Violation::NonIdenticalCandidatePositions { slot } => {
                write!(f, "non-identical candidate positions (slot {slot})")
            }
            Violation::IdentifierPosition { slot } => write!(f, "identifier position (slot {slot})"),
        }
    }
}

fn segment_rank(s: Segment) -> (usize, usize) {
    match s {
        Segment::Prefix => (0, 0),
        Segment::Candidate(k) => (1, k),
        Segment::Identifier(k) => (2, k),
    }
}

/// Checks every structural invariant; returns all violations found.
pub fn validate_layout(layout: &SequenceLayout, config: &LayoutConfig) -> Result<(), Vec<Violation>> {
    let n = layout.len();
    let m = config.num_slots;
    let mut v = Vec::new();
    if layout.positions.len() != n || layout.segments.len() != n || layout.permit.len() != n * n {
        return Err(vec![Violation::Shape(format!(
            "{} tokens, {} positions, {} segments, {} permit entries",
            n,
            layout.positions.len(),
            layout.segments.len(),
            layout.permit.len()
        ))]);
    }
    if layout.idx_st.len() != m || layout.idx_id.len() != m {
        return Err(vec![Violation::SlotIndexCount {
            st: layout.idx_st.len(),
            id: layout.idx_id.len(),
            slots: m,
        }]);
    }
    if layout.idx_st.iter().chain(&layout.idx_id).any(|&i| i >= n) {
        return Err(vec![Violation::Shape("slot index out of range".into())]);
    }

    let segs = &layout.segments;
    let p = segs.iter().take_while(|s| **s == Segment::Prefix).count();
    for i in 1..n {
        if segment_rank(segs[i]) < segment_rank(segs[i - 1]) {
            v.push(Violation::SegmentOrder { at: i });
        }
    }
    for k in 0..m {
        let st = layout.idx_st[k];
        let last_of_block = st + 1 == n || segs[st + 1] != Segment::Candidate(k);
        if layout.tokens[st] != config.doc_end || segs[st] != Segment::Candidate(k) || !last_of_block {
            v.push(Violation::MissingDocEnd { slot: k });
        }
        let id = layout.idx_id[k];
        if layout.tokens[id] != config.identifiers[k] || segs[id] != Segment::Identifier(k) {
            v.push(Violation::IdentifierToken { slot: k });
        }
    }

    for i in 0..n {
        let mut any = false;
        for j in 0..n {
            let actual = layout.permit[i * n + j];
            any |= actual;
            let expected = expected_permit(segs, i, j);
            if actual == expected {
                continue;
            }
            let violation = if !actual {
                Violation::MissingPermission { from: i, to: j }
            } else {
                match (segs[i], segs[j]) {
                    (Segment::Identifier(_), Segment::Identifier(_)) => {
                        Violation::IdentifierCrossAttention { from: i, to: j }
                    }
                    (Segment::Candidate(a), Segment::Candidate(b)) if a != b => {
                        Violation::CandidateCrossAttention { from: i, to: j }
                    }
                    _ => Violation::FutureAttention { from: i, to: j },
                }
            };
            v.push(violation);
        }
        if !any {
            v.push(Violation::EmptyRow { row: i });
        }
    }

    if layout.positions[..p].iter().enumerate().any(|(i, &pos)| pos != i) {
        v.push(Violation::PrefixPositions);
    }
    let mut longest = 0;
    for k in 0..m {
        let block: Vec<usize> = (0..n).filter(|&i| segs[i] == Segment::Candidate(k)).collect();
        longest = longest.max(block.len());
        if block.iter().enumerate().any(|(off, &i)| layout.positions[i] != p + off) {
            v.push(Violation::NonIdenticalCandidatePositions { slot: k });
        }
    }
    for k in 0..m {
        if layout.positions[layout.idx_id[k]] != p + longest {
            v.push(Violation::IdentifierPosition { slot: k });
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
