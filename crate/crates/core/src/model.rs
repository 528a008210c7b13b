//! Model adapters: the contract that turns a generation context into
//! next-token logits.
//!
//! Two adapters ship with the crate. [`ScriptedModel`] dispatches on the
//! context suffix and the image layout, which makes whole decodes
//! reproducible without any network. [`RemoteModel`] speaks a small JSON
//! protocol to an inference server returning full logit vectors.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shuffle::{shuffle_with_seed, PatchGrid};
use crate::types::{LogitVector, TokenId};

pub const PIVOT_OPEN: &str = "<RPivot>";
pub const PIVOT_CLOSE: &str = "</RPivot>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Ordered list of distinct token strings; line number in a vocabulary file
/// is the token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    // `<...>` tokens, longest first, matched verbatim by the tokenizer
    specials: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Vocabulary(format!(
                "needs at least 2 tokens, got {}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Vocabulary(format!("empty token at line {}", i + 1)));
            }
            if index.insert(tok.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token `{tok}`")));
            }
        }
        for required in [PIVOT_OPEN, PIVOT_CLOSE] {
            if !index.contains_key(required) {
                return Err(Error::Vocabulary(format!("missing special token `{required}`")));
            }
        }
        let mut specials: Vec<String> = tokens
            .iter()
            .filter(|t| t.len() > 2 && t.starts_with('<') && t.ends_with('>'))
            .cloned()
            .collect();
        specials.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Ok(Vocabulary {
            tokens,
            index,
            specials,
        })
    }

    /// Reads one token per line (UTF-8).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_owned).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.id(EOS)
    }

    pub fn unk(&self) -> Option<TokenId> {
        self.id(UNK)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.tokens.len()
    }

    /// Splits on whitespace; every punctuation character is its own piece and
    /// `<...>` vocabulary entries are kept whole.
    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut pieces = Vec::new();
        let mut word_start: Option<usize> = None;
        let mut iter = text.char_indices().peekable();
        while let Some((i, ch)) = iter.next() {
            if ch == '<' {
                if let Some(special) = self.specials.iter().find(|s| text[i..].starts_with(s.as_str())) {
                    if let Some(start) = word_start.take() {
                        pieces.push(&text[start..i]);
                    }
                    let end = i + special.len();
                    pieces.push(&text[i..end]);
                    while iter.peek().is_some_and(|(j, _)| *j < end) {
                        iter.next();
                    }
                    continue;
                }
            }
            if ch.is_whitespace() || is_punct(ch) {
                if let Some(start) = word_start.take() {
                    pieces.push(&text[start..i]);
                }
                if !ch.is_whitespace() {
                    pieces.push(&text[i..i + ch.len_utf8()]);
                }
            } else if word_start.is_none() {
                word_start = Some(i);
            }
        }
        if let Some(start) = word_start {
            pieces.push(&text[start..]);
        }
        pieces
    }

    /// Tokenizes `text`; pieces missing from the vocabulary map to `<unk>`.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        self.split(text)
            .into_iter()
            .map(|piece| {
                self.id(piece).or_else(|| self.unk()).ok_or_else(|| {
                    Error::VocabMismatch(format!(
                        "`{piece}` is not in the vocabulary and no `{UNK}` entry exists"
                    ))
                })
            })
            .collect()
    }

    /// Joins tokens with single spaces, attaching punctuation to the previous
    /// word. The end-of-sequence token is dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let eos = self.eos();
        let mut out = String::new();
        for &id in ids {
            if Some(id) == eos {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK);
            let attach = tok.chars().count() == 1 && tok.chars().all(is_punct);
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

fn is_punct(ch: char) -> bool {
    ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace() && !ch.is_control())
}

/// Text and image fed to a model for one next-token prediction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerationContext {
    pub prompt: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    pub image: Option<Arc<PatchGrid>>,
    /// Seed of the patch shuffle already applied to `image`, if any.
    pub shuffle_seed: Option<u64>,
}

impl GenerationContext {
    pub fn new(prompt: Vec<TokenId>, image: Option<PatchGrid>) -> Self {
        GenerationContext {
            prompt,
            generated: Vec::new(),
            image: image.map(Arc::new),
            shuffle_seed: None,
        }
    }

    /// Prompt followed by generated tokens.
    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.prompt.iter().chain(&self.generated).copied()
    }

    pub fn token_count(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }

    /// The `i`-th token from the end (0 = last).
    fn nth_from_end(&self, i: usize) -> Option<TokenId> {
        let g = self.generated.len();
        if i < g {
            Some(self.generated[g - 1 - i])
        } else {
            let j = i - g;
            let p = self.prompt.len();
            (j < p).then(|| self.prompt[p - 1 - j])
        }
    }

    /// Same text with the image rows permuted under `seed`. Text-only
    /// contexts come back unchanged.
    pub fn with_shuffled_image(&self, seed: u64) -> Self {
        match &self.image {
            Some(img) => GenerationContext {
                prompt: self.prompt.clone(),
                generated: self.generated.clone(),
                image: Some(Arc::new(shuffle_with_seed(img, seed))),
                shuffle_seed: Some(seed),
            },
            None => self.clone(),
        }
    }
}

/// Anything that produces next-token logits for a context.
pub trait LogitModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    fn logits(&self, ctx: &GenerationContext) -> Result<LogitVector>;

    /// Adapter-owned tokenizer; defaults to the vocabulary's word splitter.
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.vocab().encode(text)
    }
}

impl<M: LogitModel + ?Sized> LogitModel for &M {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }

    fn logits(&self, ctx: &GenerationContext) -> Result<LogitVector> {
        (**self).logits(ctx)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        (**self).tokenize(text)
    }
}

impl<M: LogitModel + ?Sized> LogitModel for Arc<M> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }

    fn logits(&self, ctx: &GenerationContext) -> Result<LogitVector> {
        (**self).logits(ctx)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        (**self).tokenize(text)
    }
}

/// Validated single call: context ids must belong to the model vocabulary
/// and the output must cover it exactly.
pub fn next_logits<M: LogitModel + ?Sized>(model: &M, ctx: &GenerationContext) -> Result<LogitVector> {
    let v = model.vocab().len();
    if let Some(bad) = ctx.tokens().find(|id| id.index() >= v) {
        return Err(Error::VocabMismatch(format!(
            "context token {bad} outside vocabulary of size {v}"
        )));
    }
    let out = model.logits(ctx)?;
    if out.len() != v {
        return Err(Error::VocabMismatch(format!(
            "model returned {} logits for vocabulary of size {v}",
            out.len()
        )));
    }
    Ok(out)
}

/// Standard and conflict pathway logits: the second call sees the same text
/// with its image patches shuffled under `shuffle_seed`.
pub fn dual_pathway_logits<M: LogitModel + ?Sized>(
    model: &M,
    ctx: &GenerationContext,
    shuffle_seed: u64,
) -> Result<(LogitVector, LogitVector)> {
    let l_std = next_logits(model, ctx)?;
    let l_conf = next_logits(model, &ctx.with_shuffled_image(shuffle_seed))?;
    Ok((l_std, l_conf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageCondition {
    #[default]
    Any,
    Absent,
    Present,
    /// Image present with rows in lexicographic order.
    Ordered,
    /// Image present with rows out of lexicographic order.
    Scrambled,
}

impl ImageCondition {
    fn holds(self, image: Option<&PatchGrid>) -> bool {
        match (self, image) {
            (ImageCondition::Any, _) => true,
            (ImageCondition::Absent, img) => img.is_none(),
            (ImageCondition::Present, img) => img.is_some(),
            (ImageCondition::Ordered, Some(img)) => img.is_row_sorted(),
            (ImageCondition::Scrambled, Some(img)) => !img.is_row_sorted(),
            (_, None) => false,
        }
    }
}

/// Scores either as a dense vector or as `token -> score` with zeros
/// elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreSpec {
    Dense(Vec<f64>),
    Sparse(BTreeMap<String, f64>),
}

impl ScoreSpec {
    fn resolve(&self, vocab: &Vocabulary) -> Result<LogitVector> {
        match self {
            ScoreSpec::Dense(v) => {
                if v.len() != vocab.len() {
                    return Err(Error::VocabMismatch(format!(
                        "rule has {} scores for vocabulary of size {}",
                        v.len(),
                        vocab.len()
                    )));
                }
                LogitVector::new(v.clone())
            }
            ScoreSpec::Sparse(map) => {
                let mut v = vec![0.0; vocab.len()];
                for (tok, score) in map {
                    let id = vocab
                        .id(tok)
                        .ok_or_else(|| Error::VocabMismatch(format!("rule names unknown token `{tok}`")))?;
                    v[id.index()] = *score;
                }
                LogitVector::new(v)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Tokens the context must end with. Empty matches every context.
    #[serde(default)]
    pub suffix: Vec<String>,
    #[serde(default)]
    pub image: ImageCondition,
    pub logits: ScoreSpec,
}

/// On-disk description of a scripted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    /// Vocabulary file, relative to the spec file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_file: Option<String>,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    pub default: ScoreSpec,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    suffix: Vec<TokenId>,
    image: ImageCondition,
    logits: LogitVector,
}

/// Rule-dispatch model: the first rule whose suffix and image condition
/// match the context supplies the logits, otherwise the default does.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    vocab: Vocabulary,
    rules: Vec<CompiledRule>,
    default: LogitVector,
}

impl ScriptedModel {
    pub fn from_spec(spec: &ScriptedModelSpec, base_dir: Option<&Path>) -> Result<Self> {
        let vocab = match (&spec.vocab, &spec.vocab_file) {
            (Some(tokens), None) => Vocabulary::new(tokens.clone())?,
            (None, Some(file)) => {
                let path = base_dir.map_or_else(|| Path::new(file).to_path_buf(), |d| d.join(file));
                Vocabulary::from_file(&path)?
            }
            _ => {
                return Err(Error::Config(
                    "scripted model needs exactly one of `vocab` or `vocab_file`".into(),
                ))
            }
        };
        let rules = spec
            .rules
            .iter()
            .map(|r| {
                let suffix = r
                    .suffix
                    .iter()
                    .map(|t| {
                        vocab
                            .id(t)
                            .ok_or_else(|| Error::VocabMismatch(format!("rule suffix names unknown token `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                Ok(CompiledRule {
                    suffix,
                    image: r.image,
                    logits: r.logits.resolve(&vocab)?,
                })
            })
            .collect::<Result<_>>()?;
        let default = spec.default.resolve(&vocab)?;
        Ok(ScriptedModel { vocab, rules, default })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ScriptedModelSpec = serde_json::from_str(&text)?;
        Self::from_spec(&spec, path.parent())
    }

    fn matches(rule: &CompiledRule, ctx: &GenerationContext) -> bool {
        if rule.suffix.len() > ctx.token_count() {
            return false;
        }
        let tail_ok = rule
            .suffix
            .iter()
            .rev()
            .enumerate()
            .all(|(i, id)| ctx.nth_from_end(i) == Some(*id));
        tail_ok && rule.image.holds(ctx.image.as_deref())
    }
}

impl LogitModel for ScriptedModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, ctx: &GenerationContext) -> Result<LogitVector> {
        let hit = self.rules.iter().find(|r| Self::matches(r, ctx));
        Ok(hit.map_or(&self.default, |r| &r.logits).clone())
    }
}

/// Wraps an adapter and counts calls.
#[derive(Debug)]
pub struct CountingModel<M> {
    inner: M,
    calls: AtomicUsize,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        CountingModel {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: LogitModel> LogitModel for CountingModel<M> {
    fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }

    fn logits(&self, ctx: &GenerationContext) -> Result<LogitVector> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.logits(ctx)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.inner.tokenize(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    pub base_url: String,
    pub timeout_ms: u64,
    /// Extra attempts after a transport failure.
    pub retries: u32,
}

impl RemoteEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteEndpoint {
            base_url: base_url.into(),
            timeout_ms: 30_000,
            retries: 2,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

/// Request body of `POST /v1/logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub tokens: Vec<u32>,
    pub patches: Option<Vec<Vec<f64>>>,
    pub shuffle_seed: Option<u64>,
}

impl LogitsRequest {
    pub fn from_context(ctx: &GenerationContext) -> Self {
        LogitsRequest {
            tokens: ctx.tokens().map(|t| t.0).collect(),
            patches: ctx.image.as_deref().map(PatchGrid::to_rows),
            shuffle_seed: ctx.shuffle_seed,
        }
    }
}

#[derive(Debug, Deserialize)]
struct LogitsResponse {
    logits: Vec<f64>,
}

pub(crate) fn http_agent(ep: &RemoteEndpoint) -> Result<ureq::Agent> {
    if ep.timeout_ms == 0 {
        return Err(Error::range("timeout_ms", "must be positive"));
    }
    let config = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(ep.timeout_ms)))
        .http_status_as_error(false)
        .build();
    Ok(ureq::Agent::new_with_config(config))
}

/// POSTs `body` as JSON and returns the raw response text, retrying
/// transport failures. Non-2xx statuses surface as model errors carrying the
/// upstream body.
pub(crate) fn post_json<B: Serialize>(
    agent: &ureq::Agent,
    ep: &RemoteEndpoint,
    path: &str,
    body: &B,
) -> Result<String> {
    let url = ep.url(path);
    let mut last = String::new();
    for _ in 0..=ep.retries {
        match agent.post(&url).send_json(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| Error::Protocol(format!("unreadable response body: {e}")))?;
                if !(200..300).contains(&status) {
                    return Err(Error::Model(format!("{url} returned {status}: {}", text.trim())));
                }
                return Ok(text);
            }
            Err(e) => last = format!("{url}: {e}"),
        }
    }
    Err(Error::Transport(last))
}

/// One remote next-token call; the response must hold exactly `vocab_size`
/// finite logits.
pub fn remote_next_logits(
    agent: &ureq::Agent,
    ep: &RemoteEndpoint,
    vocab_size: usize,
    ctx: &GenerationContext,
) -> Result<LogitVector> {
    let text = post_json(agent, ep, "/v1/logits", &LogitsRequest::from_context(ctx))?;
    let resp: LogitsResponse =
        serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("malformed logits response: {e}")))?;
    if resp.logits.len() != vocab_size {
        return Err(Error::Protocol(format!(
            "expected {vocab_size} logits, got {}",
            resp.logits.len()
        )));
    }
    LogitVector::new(resp.logits).map_err(|e| Error::Protocol(e.to_string()))
}

/// Adapter for an inference server speaking the `/v1/logits` protocol.
pub struct RemoteModel {
    endpoint: RemoteEndpoint,
    vocab: Vocabulary,
    agent: ureq::Agent,
}

impl RemoteModel {
    pub fn new(endpoint: RemoteEndpoint, vocab: Vocabulary) -> Result<Self> {
        let agent = http_agent(&endpoint)?;
        Ok(RemoteModel { endpoint, vocab, agent })
    }

    pub fn endpoint(&self) -> &RemoteEndpoint {
        &self.endpoint
    }
}

impl LogitModel for RemoteModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, ctx: &GenerationContext) -> Result<LogitVector> {
        remote_next_logits(&self.agent, &self.endpoint, self.vocab.len(), ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        let mut toks: Vec<String> = [EOS, UNK, PIVOT_OPEN, PIVOT_CLOSE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        toks.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::new(toks).unwrap()
    }

    fn spec(tokens: &[&str], rules: Vec<ScriptRule>, default: Vec<f64>) -> ScriptedModelSpec {
        ScriptedModelSpec {
            vocab: Some(tokens.iter().map(|s| s.to_string()).collect()),
            vocab_file: None,
            rules,
            default: ScoreSpec::Dense(default),
        }
    }

    const THREE: &[&str] = &[PIVOT_OPEN, PIVOT_CLOSE, "Q"];

    #[test]
    fn vocabulary_invariants() {
        assert!(Vocabulary::new(vec!["a".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "b".into()]).is_err());
        assert!(Vocabulary::new(vec![PIVOT_OPEN.into(), PIVOT_CLOSE.into(), PIVOT_OPEN.into()]).is_err());
        let v = vocab(&["x"]);
        assert_eq!(v.id("x"), Some(TokenId(4)));
        assert_eq!(v.token(TokenId(0)), Some(EOS));
    }

    #[test]
    fn splitting_and_encoding() {
        let v = vocab(&["Da", "Vinci", "was", "born", "in", "Spain", "."]);
        assert_eq!(
            v.split("Da Vinci was born in Spain."),
            vec!["Da", "Vinci", "was", "born", "in", "Spain", "."]
        );
        assert_eq!(
            v.split("in <RPivot>Spain</RPivot>!"),
            vec!["in", PIVOT_OPEN, "Spain", PIVOT_CLOSE, "!"]
        );
        let ids = v.encode("born in Rome").unwrap();
        assert_eq!(ids, vec![v.id("born").unwrap(), v.id("in").unwrap(), v.unk().unwrap()]);
        assert_eq!(v.decode(&v.encode("born in Spain .").unwrap()), "born in Spain.");
    }

    #[test]
    fn default_rule_on_empty_context() {
        let m = ScriptedModel::from_spec(&spec(THREE, vec![], vec![0.0, 1.0, 0.0]), None).unwrap();
        let out = next_logits(&m, &GenerationContext::default()).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn suffix_rule_dispatch_is_deterministic() {
        let rule = ScriptRule {
            suffix: vec!["Q".into()],
            image: ImageCondition::Any,
            logits: ScoreSpec::Dense(vec![5.0, 0.0, 0.0]),
        };
        let m = ScriptedModel::from_spec(&spec(THREE, vec![rule], vec![0.0, 1.0, 0.0]), None).unwrap();
        let ctx = GenerationContext::new(vec![TokenId(0), TokenId(2)], None);
        let a = next_logits(&m, &ctx).unwrap();
        assert_eq!(a.as_slice(), &[5.0, 0.0, 0.0]);
        assert_eq!(next_logits(&m, &ctx).unwrap(), a);
        let other = GenerationContext::new(vec![TokenId(2), TokenId(0)], None);
        assert_eq!(next_logits(&m, &other).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn suffix_spans_prompt_and_generation() {
        let rule = ScriptRule {
            suffix: vec!["Q".into(), PIVOT_OPEN.into()],
            image: ImageCondition::Any,
            logits: ScoreSpec::Sparse([("Q".to_string(), 2.0)].into()),
        };
        let m = ScriptedModel::from_spec(&spec(THREE, vec![rule], vec![0.0; 3]), None).unwrap();
        let mut ctx = GenerationContext::new(vec![TokenId(2)], None);
        ctx.generated.push(TokenId(0));
        assert_eq!(next_logits(&m, &ctx).unwrap().as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn out_of_vocabulary_context_is_rejected() {
        let m = ScriptedModel::from_spec(&spec(THREE, vec![], vec![0.0; 3]), None).unwrap();
        let ctx = GenerationContext::new(vec![TokenId(9)], None);
        assert!(matches!(next_logits(&m, &ctx), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn rule_length_must_match_vocabulary() {
        let rule = ScriptRule {
            suffix: vec![],
            image: ImageCondition::Any,
            logits: ScoreSpec::Dense(vec![1.0]),
        };
        assert!(ScriptedModel::from_spec(&spec(THREE, vec![rule], vec![0.0; 3]), None).is_err());
    }

    fn ordered_grid(n: usize) -> PatchGrid {
        PatchGrid::from_rows((0..n).map(|i| vec![i as f64, 0.5]).collect()).unwrap()
    }

    fn layout_model() -> ScriptedModel {
        let toks = &[PIVOT_OPEN, PIVOT_CLOSE];
        let rules = vec![
            ScriptRule {
                suffix: vec![],
                image: ImageCondition::Ordered,
                logits: ScoreSpec::Dense(vec![3.0, 0.0]),
            },
            ScriptRule {
                suffix: vec![],
                image: ImageCondition::Scrambled,
                logits: ScoreSpec::Dense(vec![0.0, 3.0]),
            },
        ];
        ScriptedModel::from_spec(&spec(toks, rules, vec![1.0, 1.0]), None).unwrap()
    }

    #[test]
    fn dual_pathway_sees_shuffled_layout() {
        let m = CountingModel::new(layout_model());
        let ctx = GenerationContext::new(vec![], Some(ordered_grid(6)));
        // seed 1 gives a non-identity permutation of 6 rows
        assert!(!crate::shuffle::permutation_from_seed(6, 1).unwrap().is_identity());
        let (l_std, l_conf) = dual_pathway_logits(&m, &ctx, 1).unwrap();
        assert_eq!(l_std.as_slice(), &[3.0, 0.0]);
        assert_eq!(l_conf.as_slice(), &[0.0, 3.0]);
        assert_eq!(m.calls(), 2);
    }

    #[test]
    fn single_patch_and_image_free_models_give_equal_pathways() {
        let m = layout_model();
        let ctx = GenerationContext::new(vec![], Some(ordered_grid(1)));
        let (a, b) = dual_pathway_logits(&m, &ctx, 99).unwrap();
        assert_eq!(a, b);

        let blind = ScriptedModel::from_spec(&spec(THREE, vec![], vec![0.0, 2.0, 1.0]), None).unwrap();
        let ctx = GenerationContext::new(vec![TokenId(2)], Some(ordered_grid(5)));
        let (a, b) = dual_pathway_logits(&blind, &ctx, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scripted_spec_round_trips_through_json() {
        let json = r#"{"vocab":["<RPivot>","</RPivot>","Q"],
            "rules":[{"suffix":["Q"],"image":"ordered","logits":{"Q":4.0}}],
            "default":[0,1,0]}"#;
        let s: ScriptedModelSpec = serde_json::from_str(json).unwrap();
        let m = ScriptedModel::from_spec(&s, None).unwrap();
        let ctx = GenerationContext::new(vec![TokenId(2)], Some(ordered_grid(3)));
        assert_eq!(m.logits(&ctx).unwrap().as_slice(), &[0.0, 0.0, 4.0]);
        let ctx = GenerationContext::new(vec![TokenId(2)], None);
        assert_eq!(m.logits(&ctx).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
    }
}
