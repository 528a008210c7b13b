//! Shared domain types: logit vectors, token ids, pivot token sets, gates
//! and the decoding configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary index of a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Checked construction against a vocabulary size.
    pub fn checked(index: usize, vocab_size: usize) -> Result<Self> {
        if index < vocab_size {
            Ok(TokenId(index as u32))
        } else {
            Err(Error::IndexOutOfRange { index, vocab_size })
        }
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense next-token scores over the whole vocabulary. Non-empty and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(index) = scores.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(LogitVector(scores))
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, id: TokenId) -> Option<f64> {
        self.0.get(id.index()).copied()
    }

    /// Lowest index holding the maximal score.
    pub fn argmax(&self) -> TokenId {
        TokenId(argmax_lowest(&self.0) as u32)
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        LogitVector::new(v)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

/// Index of the first maximal element; ties resolve to the lowest index.
/// `-inf` entries are ordinary values here, NaN never wins.
pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// The set of vocabulary indices whose gate is raised during contrastive
/// decoding. Bound to a vocabulary size; duplicates collapse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PivotTokenSet {
    vocab_size: usize,
    indices: BTreeSet<TokenId>,
}

impl PivotTokenSet {
    pub fn empty(vocab_size: usize) -> Self {
        PivotTokenSet {
            vocab_size,
            indices: BTreeSet::new(),
        }
    }

    pub fn new(vocab_size: usize, ids: impl IntoIterator<Item = TokenId>) -> Result<Self> {
        let mut set = Self::empty(vocab_size);
        for id in ids {
            set.insert(id)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, id: TokenId) -> Result<bool> {
        if id.index() >= self.vocab_size {
            return Err(Error::IndexOutOfRange {
                index: id.index(),
                vocab_size: self.vocab_size,
            });
        }
        Ok(self.indices.insert(id))
    }

    pub fn remove(&mut self, id: TokenId) -> bool {
        self.indices.remove(&id)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.indices.contains(&id)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Ids in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.indices.iter().copied()
    }
}

/// Per-token suppression weights, one entry per vocabulary item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateVector(pub(crate) Vec<f64>);

impl GateVector {
    /// A gate with every entry equal to `value`. Used to express plain
    /// scalar-weighted subtraction through the gated path.
    pub fn constant(len: usize, value: f64) -> Self {
        GateVector(vec![value; len])
    }

    pub fn from_vec(alpha: Vec<f64>) -> Self {
        GateVector(alpha)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Lowest-index argmax of the filtered scores.
    #[default]
    GreedyArgmax,
    /// Seeded draw from the softmax over unmasked scores.
    CutoffSample,
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy-argmax" | "greedy" => Ok(DecodeMode::GreedyArgmax),
            "cutoff-sample" | "sample" => Ok(DecodeMode::CutoffSample),
            other => Err(Error::Config(format!("unknown decode mode `{other}`"))),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::GreedyArgmax => "greedy-argmax",
            DecodeMode::CutoffSample => "cutoff-sample",
        })
    }
}

/// Hyperparameters of a decode session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Base gate applied to every token.
    pub epsilon: f64,
    /// Extra suppression available to pivot tokens.
    pub beta: f64,
    /// Temperature on conflict logits inside the gate sigmoid.
    pub kappa: f64,
    /// Plausibility cutoff, relative to the most likely token.
    pub tau: f64,
    /// Stabiliser in the projection denominator.
    pub delta: f64,
    pub max_steps: usize,
    pub mode: DecodeMode,
    pub rng_seed: u64,
    /// When false, samples without an image decode on the standard pathway
    /// alone instead of contrasting two identical contexts.
    pub contrast_without_image: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            epsilon: 0.1,
            beta: 0.2,
            kappa: 0.1,
            tau: 0.1,
            delta: 1e-6,
            max_steps: 32,
            mode: DecodeMode::GreedyArgmax,
            rng_seed: 0,
            contrast_without_image: true,
        }
    }
}

const CONFIG_KEYS: [&str; 9] = [
    "epsilon",
    "beta",
    "kappa",
    "tau",
    "delta",
    "max_steps",
    "mode",
    "rng_seed",
    "contrast_without_image",
];

impl DecodeConfig {
    /// Checks every numeric hyperparameter. `max_steps` is left to
    /// [`validate_config`] so that decoders can run zero-step sessions.
    pub fn check_hyperparameters(&self) -> Result<()> {
        fn finite(field: &'static str, x: f64) -> Result<()> {
            if x.is_finite() {
                Ok(())
            } else {
                Err(Error::range(field, format!("{x} is not finite")))
            }
        }
        finite("epsilon", self.epsilon)?;
        finite("beta", self.beta)?;
        finite("kappa", self.kappa)?;
        finite("tau", self.tau)?;
        finite("delta", self.delta)?;
        if self.epsilon < 0.0 {
            return Err(Error::range("epsilon", "must be >= 0"));
        }
        if self.beta < 0.0 {
            return Err(Error::range("beta", "must be >= 0"));
        }
        if self.kappa <= 0.0 {
            return Err(Error::range("kappa", "must be > 0"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::range("tau", "must lie in (0, 1]"));
        }
        if self.delta <= 0.0 {
            return Err(Error::range("delta", "must be > 0"));
        }
        Ok(())
    }

    /// Parses the flat `key = value` format. Blank lines and `#` comments are
    /// ignored; keys not listed are rejected; missing keys keep defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = DecodeConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    /// Renders the flat `key = value` format; floats use shortest
    /// round-trip formatting so parsing the output restores every bit.
    pub fn to_kv(&self) -> String {
        format!(
            "epsilon = {:?}\nbeta = {:?}\nkappa = {:?}\ntau = {:?}\ndelta = {:?}\n\
             max_steps = {}\nmode = {}\nrng_seed = {}\ncontrast_without_image = {}\n",
            self.epsilon,
            self.beta,
            self.kappa,
            self.tau,
            self.delta,
            self.max_steps,
            self.mode,
            self.rng_seed,
            self.contrast_without_image,
        )
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        match key {
            "epsilon" => self.epsilon = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "kappa" => self.kappa = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "delta" => self.delta = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "rng_seed" => self.rng_seed = num(key, value)?,
            "contrast_without_image" => self.contrast_without_image = num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (expected one of {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

/// Returns the config unchanged when every field lies in its range.
pub fn validate_config(cfg: DecodeConfig) -> Result<DecodeConfig> {
    cfg.check_hyperparameters()?;
    if cfg.max_steps == 0 {
        return Err(Error::range("max_steps", "must be positive"));
    }
    Ok(cfg)
}
