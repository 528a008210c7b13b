//! Reasoning pivots: chain bookkeeping, the same-pivot conflict predicate,
//! span-to-token mapping and `<RPivot>` span markup.
//!
//! A conflict is only ever declared between assertions attached to the same
//! pivot. Two passages naming different locations for different chain
//! stages are not in conflict; two passages giving different values for the
//! same single-valued pivot are.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LogitModel, PIVOT_CLOSE, PIVOT_OPEN};
use crate::types::PivotTokenSet;

/// Reference to a node, an edge, or the terminal answer node of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PivotId {
    Node(usize),
    Edge(usize),
    Answer,
}

impl fmt::Display for PivotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PivotId::Node(i) => write!(f, "node:{i}"),
            PivotId::Edge(i) => write!(f, "edge:{i}"),
            PivotId::Answer => f.write_str("answer"),
        }
    }
}

impl FromStr for PivotId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "answer" {
            return Ok(PivotId::Answer);
        }
        let parse = |rest: &str| rest.parse::<usize>().map_err(|_| Error::UnresolvedPivot(s.to_owned()));
        if let Some(rest) = s.strip_prefix("node:") {
            Ok(PivotId::Node(parse(rest)?))
        } else if let Some(rest) = s.strip_prefix("edge:") {
            Ok(PivotId::Edge(parse(rest)?))
        } else {
            Err(Error::UnresolvedPivot(s.to_owned()))
        }
    }
}

impl TryFrom<String> for PivotId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PivotId> for String {
    fn from(p: PivotId) -> Self {
        p.to_string()
    }
}

/// `e1 -p1-> e2 -p2-> ... -> y`: entities as nodes, properties as edges
/// between consecutive nodes. The last node is the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ChainRepr", into = "ChainRepr")]
pub struct ReasoningChain {
    nodes: Vec<String>,
    edges: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ChainRepr {
    nodes: Vec<String>,
    edges: Vec<String>,
    answer: String,
}

impl TryFrom<ChainRepr> for ReasoningChain {
    type Error = Error;

    fn try_from(r: ChainRepr) -> Result<Self> {
        let chain = ReasoningChain::new(r.nodes, r.edges)?;
        if chain.answer() != r.answer {
            return Err(Error::Validation(format!(
                "answer `{}` is not the terminal node `{}`",
                r.answer,
                chain.answer()
            )));
        }
        Ok(chain)
    }
}

impl From<ReasoningChain> for ChainRepr {
    fn from(c: ReasoningChain) -> Self {
        let answer = c.answer().to_owned();
        ChainRepr {
            nodes: c.nodes,
            edges: c.edges,
            answer,
        }
    }
}

impl ReasoningChain {
    pub fn new(nodes: Vec<String>, edges: Vec<String>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Validation(
                "reasoning chain needs at least the answer node".into(),
            ));
        }
        if edges.len() + 1 != nodes.len() {
            return Err(Error::Validation(format!(
                "{} nodes need {} edges, got {}",
                nodes.len(),
                nodes.len() - 1,
                edges.len()
            )));
        }
        if nodes.iter().chain(&edges).any(|l| l.trim().is_empty()) {
            return Err(Error::Validation("chain labels must be non-empty".into()));
        }
        Ok(ReasoningChain { nodes, edges })
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn edges(&self) -> &[String] {
        &self.edges
    }

    pub fn answer(&self) -> &str {
        self.nodes.last().expect("chain is non-empty")
    }

    /// Resolves `id`, mapping the terminal node onto [`PivotId::Answer`].
    pub fn canonical(&self, id: PivotId) -> Result<PivotId> {
        let last = self.nodes.len() - 1;
        match id {
            PivotId::Node(i) if i == last => Ok(PivotId::Answer),
            PivotId::Node(i) if i < last => Ok(id),
            PivotId::Edge(i) if i < self.edges.len() => Ok(id),
            PivotId::Answer => Ok(id),
            _ => Err(Error::UnresolvedPivot(id.to_string())),
        }
    }

    /// Every pivot of the chain: nodes, edges and the answer.
    pub fn pivots(&self) -> Vec<PivotId> {
        let mut out: Vec<PivotId> = (0..self.nodes.len() - 1).map(PivotId::Node).collect();
        out.extend((0..self.edges.len()).map(PivotId::Edge));
        out.push(PivotId::Answer);
        out
    }

    pub fn label(&self, id: PivotId) -> Result<&str> {
        Ok(match self.canonical(id)? {
            PivotId::Node(i) => &self.nodes[i],
            PivotId::Edge(i) => &self.edges[i],
            PivotId::Answer => self.answer(),
        })
    }
}

/// Surface normalisation: lowercase, trimmed, inner whitespace collapsed,
/// then mapped through an optional alias table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasTable {
    map: HashMap<String, String>,
}

pub fn normalize_surface(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, canonical: &str) {
        self.map
            .insert(normalize_surface(surface), normalize_surface(canonical));
    }

    /// Two tab-separated columns per line: surface, canonical form.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, canonical) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("alias line {}: expected `surface<TAB>canonical`", n + 1)))?;
            table.insert(surface, canonical);
        }
        Ok(table)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn normalize(&self, s: &str) -> String {
        let n = normalize_surface(s);
        self.map.get(&n).cloned().unwrap_or(n)
    }
}

/// One value asserted for a pivot by one source passage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PivotAssertion {
    pivot: PivotId,
    value: String,
    source: String,
}

impl PivotAssertion {
    pub fn new(pivot: PivotId, raw_value: &str, source: impl Into<String>, aliases: &AliasTable) -> Result<Self> {
        let value = aliases.normalize(raw_value);
        if value.is_empty() {
            return Err(Error::Validation(format!("empty assertion value for pivot {pivot}")));
        }
        Ok(PivotAssertion {
            pivot,
            value,
            source: source.into(),
        })
    }

    pub fn pivot(&self) -> PivotId {
        self.pivot
    }

    pub fn value(&self) -> &str {
        &self.value
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

/// Pivots whose assertion set holds two or more distinct values.
pub fn detect_conflicts(chain: &ReasoningChain, assertions: &[PivotAssertion]) -> Result<BTreeSet<PivotId>> {
    let mut values: BTreeMap<PivotId, BTreeSet<&str>> = BTreeMap::new();
    for a in assertions {
        let pivot = chain.canonical(a.pivot)?;
        values.entry(pivot).or_default().insert(&a.value);
    }
    Ok(values
        .into_iter()
        .filter(|(_, vals)| vals.len() >= 2)
        .map(|(p, _)| p)
        .collect())
}

/// A pivot mention inside one passage, by character offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PivotSpan {
    pub passage: usize,
    pub pivot: PivotId,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

fn byte_offset(s: &str, char_idx: usize) -> Option<usize> {
    if char_idx == s.chars().count() {
        return Some(s.len());
    }
    s.char_indices().nth(char_idx).map(|(b, _)| b)
}

impl PivotSpan {
    /// Span over the `nth` occurrence of `surface` in `passage_text`.
    pub fn locate(passage: usize, pivot: PivotId, passage_text: &str, surface: &str, nth: usize) -> Result<Self> {
        if surface.is_empty() {
            return Err(Error::Span("empty surface".into()));
        }
        let (byte_start, _) = passage_text
            .match_indices(surface)
            .nth(nth)
            .ok_or_else(|| Error::Span(format!("`{surface}` not found in passage {passage}")))?;
        let start = passage_text[..byte_start].chars().count();
        Ok(PivotSpan {
            passage,
            pivot,
            start,
            end: start + surface.chars().count(),
            text: surface.to_owned(),
        })
    }

    /// Byte range of the span inside `passage_text`, after checking offsets
    /// and surface text.
    pub fn byte_range(&self, passage_text: &str) -> Result<std::ops::Range<usize>> {
        if self.start >= self.end {
            return Err(Error::Span(format!(
                "empty or inverted span {}..{}",
                self.start, self.end
            )));
        }
        let (Some(b0), Some(b1)) = (
            byte_offset(passage_text, self.start),
            byte_offset(passage_text, self.end),
        ) else {
            return Err(Error::Span(format!(
                "span {}..{} exceeds passage length",
                self.start, self.end
            )));
        };
        if passage_text[b0..b1] != self.text {
            return Err(Error::Span(format!(
                "span text `{}` does not match passage text `{}`",
                self.text,
                &passage_text[b0..b1]
            )));
        }
        Ok(b0..b1)
    }

    pub fn validate(&self, passage_text: &str) -> Result<()> {
        self.byte_range(passage_text).map(|_| ())
    }
}

/// Pivot token set plus the number of span pieces that fell back to
/// `<unk>` and were left out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PivotTokens {
    pub set: PivotTokenSet,
    pub unknown: usize,
}

/// Union of the token ids of every span surface, tokenized as written and
/// with one leading space. Unknown pieces and the end-of-sequence token are
/// excluded.
pub fn pivot_token_set<M: LogitModel + ?Sized>(spans: &[PivotSpan], model: &M) -> Result<PivotTokens> {
    let vocab = model.vocab();
    let excluded = [vocab.unk(), vocab.eos()];
    let mut set = PivotTokenSet::empty(vocab.len());
    let mut unknown = 0;
    for span in spans {
        for text in [span.text.clone(), format!(" {}", span.text)] {
            for id in model.tokenize(&text)? {
                if Some(id) == excluded[0] {
                    unknown += 1;
                } else if Some(id) != excluded[1] {
                    set.insert(id)?;
                }
            }
        }
    }
    Ok(PivotTokens { set, unknown })
}

/// Encloses each span of `passage` in `<RPivot>` / `</RPivot>`. Spans must
/// be sorted and non-overlapping; a passage already carrying markers is
/// refused.
pub fn wrap_pivot_tokens(passage: &str, spans: &[PivotSpan]) -> Result<String> {
    if passage.contains(PIVOT_OPEN) || passage.contains(PIVOT_CLOSE) {
        return Err(Error::AlreadyWrapped);
    }
    let mut out = String::with_capacity(passage.len() + spans.len() * 17);
    let mut cursor = 0;
    let mut last_end = 0;
    for span in spans {
        if span.start < last_end {
            return Err(Error::Overlap(span.start));
        }
        let range = span.byte_range(passage)?;
        out.push_str(&passage[cursor..range.start]);
        out.push_str(PIVOT_OPEN);
        out.push_str(&passage[range.clone()]);
        out.push_str(PIVOT_CLOSE);
        cursor = range.end;
        last_end = span.end;
    }
    out.push_str(&passage[cursor..]);
    Ok(out)
}

/// Removes every pivot marker.
pub fn strip_pivot_tokens(text: &str) -> String {
    text.replace(PIVOT_OPEN, "").replace(PIVOT_CLOSE, "")
}

/// Three-part supervision target: pivots of the question, pivots of each
/// passage, then the binary conflict verdict.
pub fn reasoning_target(question_pivots: &[&str], passages: &[String], spans: &[PivotSpan], conflict: bool) -> String {
    let wrap = |s: &str| format!("{PIVOT_OPEN}{s}{PIVOT_CLOSE}");
    let mut out = String::from("Question pivots:");
    for p in question_pivots {
        out.push(' ');
        out.push_str(&wrap(p));
    }
    out.push('\n');
    for (i, _) in passages.iter().enumerate() {
        out.push_str(&format!("Passage {} pivots:", i + 1));
        for span in spans.iter().filter(|s| s.passage == i) {
            out.push(' ');
            out.push_str(&wrap(&span.text));
        }
        out.push('\n');
    }
    out.push_str(if conflict { "Conflict: yes" } else { "Conflict: no" });
    out
}
