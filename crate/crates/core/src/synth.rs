//! Conflict corpus construction: counterfactual pivot selection, anchored
//! passage rewriting and the ten-vote quality filter.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{http_agent, post_json, RemoteEndpoint};
use crate::pivot::{
    detect_conflicts, normalize_surface, AliasTable, PivotAssertion, PivotId, PivotSpan, ReasoningChain,
};
use crate::shuffle::{seeded_shuffle, uniform_below, PatchGrid};

/// Passages per sample.
pub const DEFAULT_K: usize = 5;
/// Scorer calls per sample.
pub const VOTES: usize = 10;
pub const MAX_SCORE: u32 = 10;
pub const RETAIN_SUM: u32 = 80;
pub const RETAIN_MIN: u32 = 6;

const REWRITE_TEMPLATE: &str = include_str!("../templates/rewrite.txt");
const SCORE_TEMPLATE: &str = include_str!("../templates/score.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConflictLabel {
    NoConflict,
    SubtleConflict,
    HighConflict,
}

impl ConflictLabel {
    pub fn is_conflict(self) -> bool {
        self != ConflictLabel::NoConflict
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConflictLabel::NoConflict => "no-conflict",
            ConflictLabel::SubtleConflict => "subtle-conflict",
            ConflictLabel::HighConflict => "high-conflict",
        }
    }
}

/// Where a sample's image lives: inline rows, or a raw little-endian `f64`
/// file of `rows * dim` values resolved against the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Inline { patches: PatchGrid },
    File { path: PathBuf, rows: usize, dim: usize },
}

impl ImageRef {
    pub fn load(&self, base_dir: Option<&Path>) -> Result<PatchGrid> {
        match self {
            ImageRef::Inline { patches } => Ok(patches.clone()),
            ImageRef::File { path, rows, dim } => {
                let full = match base_dir {
                    Some(d) if path.is_relative() => d.join(path),
                    _ => path.clone(),
                };
                PatchGrid::read_binary(&full, *rows, *dim)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictSample {
    pub sample_id: u64,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageRef>,
    pub passages: Vec<String>,
    pub chain: ReasoningChain,
    pub spans: Vec<PivotSpan>,
    pub label: ConflictLabel,
    pub answer: String,
}

impl ConflictSample {
    /// Checks the passage count and that every span resolves against both
    /// its passage and the chain.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.passages.len() != k {
            return Err(Error::Validation(format!(
                "sample {}: expected {k} passages, got {}",
                self.sample_id,
                self.passages.len()
            )));
        }
        for span in &self.spans {
            let passage = self.passages.get(span.passage).ok_or_else(|| {
                Error::Span(format!(
                    "sample {}: span refers to passage {}",
                    self.sample_id, span.passage
                ))
            })?;
            span.validate(passage)?;
            self.chain.canonical(span.pivot)?;
        }
        Ok(())
    }

    /// One assertion per annotated span: the span surface is the value the
    /// passage gives for that pivot.
    pub fn assertions(&self, aliases: &AliasTable) -> Result<Vec<PivotAssertion>> {
        self.spans
            .iter()
            .map(|s| PivotAssertion::new(s.pivot, &s.text, format!("passage:{}", s.passage), aliases))
            .collect()
    }

    pub fn conflicting_pivots(&self, aliases: &AliasTable) -> Result<BTreeSet<PivotId>> {
        detect_conflicts(&self.chain, &self.assertions(aliases)?)
    }
}

/// Reads and validates a JSONL corpus with `k` passages per sample.
pub fn load_corpus(path: &Path, k: usize) -> Result<Vec<ConflictSample>> {
    let samples: Vec<ConflictSample> = crate::jsonl::read(path)?;
    let mut seen = BTreeSet::new();
    for s in &samples {
        s.validate(k)?;
        if !seen.insert(s.sample_id) {
            return Err(Error::Validation(format!("duplicate sample_id {}", s.sample_id)));
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub input: String,
    pub output: String,
}

pub fn default_demonstrations() -> Vec<Demonstration> {
    let demo = |input: &str, output: &str| Demonstration {
        input: input.into(),
        output: output.into(),
    };
    vec![
        demo(
            "The bridge crosses the Danube in Budapest. Replace Budapest with Vienna.",
            "The bridge crosses the Danube in Vienna.",
        ),
        demo(
            "The cathedral was designed by Antoni Gaudi. Replace Antoni Gaudi with Lluis Domenech.",
            "The cathedral was designed by Lluis Domenech.",
        ),
        demo(
            "The tower opened to visitors in 1889. Replace 1889 with 1931.",
            "The tower opened to visitors in 1931.",
        ),
    ]
}

/// Instruction to swap `p_gt` for `p_neg` in one passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteRequest {
    passage: String,
    p_gt: String,
    p_neg: String,
    reference_context: String,
    demonstrations: Vec<Demonstration>,
}

impl RewriteRequest {
    pub fn new(passage: &str, p_gt: &str, p_neg: &str, reference_context: &str) -> Result<Self> {
        if p_gt.trim().is_empty() || p_neg.trim().is_empty() {
            return Err(Error::Validation("pivot surfaces must be non-empty".into()));
        }
        if !passage.contains(p_gt) {
            return Err(Error::Validation(format!("`{p_gt}` does not occur in the passage")));
        }
        if normalize_surface(p_neg).contains(&normalize_surface(p_gt)) {
            return Err(Error::Validation(format!("`{p_neg}` contains the value it replaces")));
        }
        if reference_context.trim().is_empty() {
            return Err(Error::Validation("reference context is empty".into()));
        }
        Ok(RewriteRequest {
            passage: passage.into(),
            p_gt: p_gt.into(),
            p_neg: p_neg.into(),
            reference_context: reference_context.into(),
            demonstrations: default_demonstrations(),
        })
    }

    pub fn with_demonstrations(mut self, demonstrations: Vec<Demonstration>) -> Self {
        self.demonstrations = demonstrations;
        self
    }

    pub fn passage(&self) -> &str {
        &self.passage
    }

    pub fn p_gt(&self) -> &str {
        &self.p_gt
    }

    pub fn p_neg(&self) -> &str {
        &self.p_neg
    }

    pub fn reference_context(&self) -> &str {
        &self.reference_context
    }

    pub fn demonstrations(&self) -> &[Demonstration] {
        &self.demonstrations
    }

    pub fn render_prompt(&self) -> String {
        let demos: String = self
            .demonstrations
            .iter()
            .map(|d| format!("Example input: {}\nExample output: {}\n\n", d.input, d.output))
            .collect();
        render(
            REWRITE_TEMPLATE,
            &[
                ("p_gt", &self.p_gt),
                ("p_neg", &self.p_neg),
                ("reference", &self.reference_context),
                ("demonstrations", &demos),
                ("passage", &self.passage),
            ],
        )
    }
}

fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_owned();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub value: String,
    pub category: String,
}

/// First entry of a seeded shuffle over the candidates that share the
/// category of `p_gt` and differ from it.
pub fn select_counterfactual(p_gt: &Candidate, candidates: &[Candidate], seed: u64) -> Result<String> {
    let target = normalize_surface(&p_gt.value);
    let mut feasible: Vec<&Candidate> = candidates
        .iter()
        .filter(|c| c.category == p_gt.category && normalize_surface(&c.value) != target)
        .collect();
    if feasible.is_empty() {
        return Err(Error::NoCandidate(p_gt.value.clone()));
    }
    seeded_shuffle(&mut feasible, seed);
    Ok(feasible[0].value.clone())
}

pub trait Rewriter: Send + Sync {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String>;
}

/// Seeded quality score in `0..=10` for a candidate sample.
pub trait Scorer: Send + Sync {
    fn score(&self, sample: &ConflictSample, seed: u64) -> Result<u32>;
}

/// Substitutes the surface and appends the first reference sentence.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockRewriter;

fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    let mut chars = text.char_indices().peekable();
    while let Some((i, ch)) = chars.next() {
        if matches!(ch, '.' | '!' | '?') && chars.peek().is_none_or(|(_, next)| next.is_whitespace()) {
            return &text[..i + ch.len_utf8()];
        }
    }
    text
}

impl Rewriter for MockRewriter {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String> {
        let replaced = req.passage.replace(&req.p_gt, &req.p_neg);
        Ok(format!(
            "{} {}",
            replaced.trim_end(),
            first_sentence(&req.reference_context)
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockScorer {
    Fixed(u32),
    /// Uniform in `low..=high`, a pure function of the call seed.
    Seeded {
        low: u32,
        high: u32,
    },
}

impl Scorer for MockScorer {
    fn score(&self, _sample: &ConflictSample, seed: u64) -> Result<u32> {
        match *self {
            MockScorer::Fixed(s) => Ok(s),
            MockScorer::Seeded { low, high } => {
                if low > high || high > MAX_SCORE {
                    return Err(Error::range("score", format!("invalid mock range {low}..={high}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(low + uniform_below(&mut rng, u64::from(high - low) + 1) as u32)
            }
        }
    }
}

/// Rewriter speaking `POST /v1/rewrite`: `{"prompt", "request"}` in,
/// `{"text"}` out.
pub struct RemoteRewriter {
    endpoint: RemoteEndpoint,
    agent: ureq::Agent,
}

/// Scorer speaking `POST /v1/score`: `{"prompt", "seed"}` in, `{"score"}` out.
pub struct RemoteScorer {
    endpoint: RemoteEndpoint,
    agent: ureq::Agent,
}

fn client_call<B: Serialize, R: for<'de> Deserialize<'de>>(
    agent: &ureq::Agent,
    ep: &RemoteEndpoint,
    path: &str,
    body: &B,
) -> Result<R> {
    let text = post_json(agent, ep, path, body).map_err(|e| match e {
        Error::Transport(m) | Error::Model(m) | Error::Protocol(m) => Error::Client(m),
        other => other,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Client(format!("malformed response from {path}: {e}")))
}

impl RemoteRewriter {
    pub fn new(endpoint: RemoteEndpoint) -> Result<Self> {
        let agent = http_agent(&endpoint)?;
        Ok(RemoteRewriter { endpoint, agent })
    }
}

impl Rewriter for RemoteRewriter {
    fn rewrite(&self, req: &RewriteRequest) -> Result<String> {
        #[derive(Serialize)]
        struct Body<'a> {
            prompt: String,
            request: &'a RewriteRequest,
        }
        #[derive(Deserialize)]
        struct Reply {
            text: String,
        }
        let body = Body {
            prompt: req.render_prompt(),
            request: req,
        };
        let reply: Reply = client_call(&self.agent, &self.endpoint, "/v1/rewrite", &body)?;
        Ok(reply.text)
    }
}

impl RemoteScorer {
    pub fn new(endpoint: RemoteEndpoint) -> Result<Self> {
        let agent = http_agent(&endpoint)?;
        Ok(RemoteScorer { endpoint, agent })
    }
}

pub fn render_score_prompt(sample: &ConflictSample) -> String {
    let passages: String = sample
        .passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {p}\n", i + 1))
        .collect();
    render(
        SCORE_TEMPLATE,
        &[
            ("question", &sample.question),
            ("answer", &sample.answer),
            ("label", sample.label.as_str()),
            ("passages", &passages),
        ],
    )
}

impl Scorer for RemoteScorer {
    fn score(&self, sample: &ConflictSample, seed: u64) -> Result<u32> {
        #[derive(Serialize)]
        struct Body {
            prompt: String,
            seed: u64,
        }
        #[derive(Deserialize)]
        struct Reply {
            score: u32,
        }
        let body = Body {
            prompt: render_score_prompt(sample),
            seed,
        };
        let reply: Reply = client_call(&self.agent, &self.endpoint, "/v1/score", &body)?;
        Ok(reply.score)
    }
}

/// Runs the rewriter and checks that the output names `p_neg` and no longer
/// names `p_gt`.
pub fn rewrite_passage<R: Rewriter + ?Sized>(req: &RewriteRequest, client: &R) -> Result<String> {
    let out = client.rewrite(req)?;
    let norm = normalize_surface(&out);
    if !norm.contains(&normalize_surface(&req.p_neg)) {
        return Err(Error::Validation(format!("rewrite does not mention `{}`", req.p_neg)));
    }
    if norm.contains(&normalize_surface(&req.p_gt)) {
        return Err(Error::Validation(format!("rewrite still mentions `{}`", req.p_gt)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Retain,
    Reject,
}

/// Retain iff the ten scores sum to at least 80 and none is below 6.
pub fn vote_of_confidence(scores: &[u32]) -> Result<Vote> {
    if scores.len() != VOTES {
        return Err(Error::Arity {
            expected: VOTES,
            actual: scores.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|&&s| s > MAX_SCORE) {
        return Err(Error::range("score", format!("{bad} exceeds {MAX_SCORE}")));
    }
    let sum: u32 = scores.iter().sum();
    let min = *scores.iter().min().expect("ten scores");
    Ok(if sum >= RETAIN_SUM && min >= RETAIN_MIN {
        Vote::Retain
    } else {
        Vote::Reject
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub passage: usize,
    pub request: RewriteRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub sample_id: u64,
    pub scores: Vec<u32>,
    pub sample: ConflictSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum SynthOutcome {
    Retained { sample: ConflictSample, scores: Vec<u32> },
    Rejected(Rejection),
}

/// Seed of scorer call `vote` for `sample_id`.
pub fn vote_seed(seed: u64, sample_id: u64, vote: usize) -> u64 {
    seed ^ sample_id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (vote as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Re-finds the spans of a rewritten passage in order, swapping the
/// substituted surface. Spans that no longer occur are dropped.
fn relocate_spans(passage: usize, text: &str, old: &[&PivotSpan], p_gt: &str, p_neg: &str) -> Vec<PivotSpan> {
    let mut out = Vec::new();
    let mut cursor_byte = 0;
    for span in old {
        let surface = if span.text == p_gt { p_neg } else { span.text.as_str() };
        let Some(found) = text[cursor_byte..].find(surface) else {
            continue;
        };
        let b0 = cursor_byte + found;
        let start = text[..b0].chars().count();
        out.push(PivotSpan {
            passage,
            pivot: span.pivot,
            start,
            end: start + surface.chars().count(),
            text: surface.to_owned(),
        });
        cursor_byte = b0 + surface.len();
    }
    out
}

/// Applies the substitutions, relabels, then scores the result ten times.
pub fn build_sample<R: Rewriter + ?Sized, S: Scorer + ?Sized>(
    base: &ConflictSample,
    substitutions: &[Substitution],
    client: &R,
    scorer: &S,
    seed: u64,
) -> Result<SynthOutcome> {
    let k = base.passages.len();
    let mut seen = BTreeSet::new();
    for sub in substitutions {
        if sub.passage >= k || !seen.insert(sub.passage) {
            return Err(Error::Validation(format!(
                "substitution passage index {} is repeated or not below {k}",
                sub.passage
            )));
        }
    }
    let mut sample = base.clone();
    let mut label = ConflictLabel::NoConflict;
    let mut new_spans: BTreeMap<usize, Vec<PivotSpan>> = BTreeMap::new();
    for sub in substitutions {
        let req = &sub.request;
        if req.passage != base.passages[sub.passage] {
            return Err(Error::Validation(format!(
                "rewrite request text differs from passage {}",
                sub.passage
            )));
        }
        let own: Vec<&PivotSpan> = base.spans.iter().filter(|s| s.passage == sub.passage).collect();
        let pivot = own
            .iter()
            .find(|s| s.text == req.p_gt)
            .map(|s| s.pivot)
            .ok_or_else(|| {
                Error::Span(format!(
                    "`{}` is not an annotated pivot of passage {}",
                    req.p_gt, sub.passage
                ))
            })?;
        let text = rewrite_passage(req, client)?;
        new_spans.insert(
            sub.passage,
            relocate_spans(sub.passage, &text, &own, &req.p_gt, &req.p_neg),
        );
        sample.passages[sub.passage] = text;
        let this = if base.chain.canonical(pivot)? == PivotId::Answer {
            ConflictLabel::HighConflict
        } else {
            ConflictLabel::SubtleConflict
        };
        label = label.max(this);
    }
    if !new_spans.is_empty() {
        sample.spans.retain(|s| !new_spans.contains_key(&s.passage));
        sample.spans.extend(new_spans.into_values().flatten());
        sample.spans.sort_by_key(|s| (s.passage, s.start));
    }
    sample.label = label;

    let scores = (0..VOTES)
        .map(|j| scorer.score(&sample, vote_seed(seed, sample.sample_id, j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(match vote_of_confidence(&scores)? {
        Vote::Retain => SynthOutcome::Retained { sample, scores },
        Vote::Reject => SynthOutcome::Rejected(Rejection {
            sample_id: sample.sample_id,
            scores,
            sample,
        }),
    })
}

/// A planned substitution: the replacement value is picked from
/// `candidates` at run time and its reference text looked up in
/// `references`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionPlan {
    pub passage: usize,
    pub p_gt: Candidate,
    pub candidates: Vec<Candidate>,
    pub references: BTreeMap<String, String>,
}

/// One line of a synthesis input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub base: ConflictSample,
    #[serde(default)]
    pub substitutions: Vec<SubstitutionPlan>,
}

impl SynthTask {
    pub fn requests(&self, seed: u64) -> Result<Vec<Substitution>> {
        self.substitutions
            .iter()
            .enumerate()
            .map(|(i, plan)| {
                let pick_seed = vote_seed(seed, self.base.sample_id, VOTES + i);
                let p_neg = select_counterfactual(&plan.p_gt, &plan.candidates, pick_seed)?;
                let reference = plan
                    .references
                    .get(&p_neg)
                    .ok_or_else(|| Error::Validation(format!("no reference context for `{p_neg}`")))?;
                let passage = self.base.passages.get(plan.passage).ok_or_else(|| {
                    Error::Validation(format!("substitution passage index {} out of range", plan.passage))
                })?;
                Ok(Substitution {
                    passage: plan.passage,
                    request: RewriteRequest::new(passage, &plan.p_gt.value, &p_neg, reference)?,
                })
            })
            .collect()
    }

    pub fn run<R: Rewriter + ?Sized, S: Scorer + ?Sized>(
        &self,
        client: &R,
        scorer: &S,
        seed: u64,
    ) -> Result<SynthOutcome> {
        build_sample(&self.base, &self.requests(seed)?, client, scorer, seed)
    }
}
