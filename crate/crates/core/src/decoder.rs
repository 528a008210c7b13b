//! Decoding loops: pivot-gated projection contrast, plain greedy, and the
//! linear-subtraction contrast baseline, with cutoff filtering and token
//! selection shared between them.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{gated_subtract_final, init_gate, linear_subtract, raise_pivot_gate};
use crate::error::{Error, Result};
use crate::model::{next_logits, GenerationContext, LogitModel};
use crate::trace::{DecodeTrace, StepRecord, TraceMethod};
use crate::types::{argmax_lowest, DecodeConfig, DecodeMode, LogitVector, PivotTokenSet, TokenId};

/// Sampling draws use an independent ChaCha8 stream from the patch shuffle.
const SAMPLING_SALT: u64 = 0x5A4D_504C_494E_4721;

/// Scores after cutoff; masked entries hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredLogits(Vec<f64>);

impl FilteredLogits {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn unmasked(&self) -> usize {
        self.0.iter().filter(|x| x.is_finite()).count()
    }

    pub fn is_masked(&self, id: TokenId) -> bool {
        self.0[id.index()] == f64::NEG_INFINITY
    }
}

/// Keeps tokens with `l[v] >= max(l) + ln(tau)`, i.e. softmax probability at
/// least `tau` times the top probability; masks the rest to `-inf`.
pub fn cutoff_filter(l_final: &LogitVector, tau: f64) -> Result<FilteredLogits> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::range("tau", "must lie in (0, 1]"));
    }
    let xs = l_final.as_slice();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = max + tau.ln();
    Ok(FilteredLogits(
        xs.iter()
            .map(|&x| if x >= threshold { x } else { f64::NEG_INFINITY })
            .collect(),
    ))
}

/// Uniform draw in `[0, 1)` from the top 53 bits.
fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Picks the next token. Argmax ties go to the lowest index; sampling draws
/// from the softmax restricted to unmasked entries.
pub fn select_token(filtered: &FilteredLogits, mode: DecodeMode, rng: &mut ChaCha8Rng) -> Result<TokenId> {
    let xs = filtered.as_slice();
    if !xs.iter().any(|x| x.is_finite()) {
        return Err(Error::AllMasked);
    }
    match mode {
        DecodeMode::GreedyArgmax => Ok(TokenId(argmax_lowest(xs) as u32)),
        DecodeMode::CutoffSample => {
            let max = xs[argmax_lowest(xs)];
            let weights: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let target = unit_f64(rng) * total;
            let mut acc = 0.0;
            let mut last = 0;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    acc += w;
                    last = i;
                    if target < acc {
                        return Ok(TokenId(i as u32));
                    }
                }
            }
            Ok(TokenId(last as u32))
        }
    }
}

pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ SAMPLING_SALT)
}

/// Decoding strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    Greedy,
    Rpgd,
    Linear { lambda: f64 },
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Method::Greedy),
            "rpgd" => Ok(Method::Rpgd),
            other => {
                let lambda = other
                    .strip_prefix("linear:")
                    .and_then(|l| l.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!("unknown method `{other}` (greedy, rpgd, linear:<lambda>)"))
                    })?;
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::range("lambda", "must be finite and >= 0"));
                }
                Ok(Method::Linear { lambda })
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Greedy => f.write_str("greedy"),
            Method::Rpgd => f.write_str("rpgd"),
            Method::Linear { lambda } => write!(f, "linear:{lambda}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub trace: DecodeTrace,
}

impl DecodeResult {
    /// Mean wall time per emitted token in nanoseconds.
    pub fn nanos_per_token(&self) -> Option<f64> {
        (!self.tokens.is_empty()).then(|| self.trace.total_nanos() as f64 / self.tokens.len() as f64)
    }
}

fn elapsed_nanos(start: Instant) -> u64 {
    (start.elapsed().as_nanos() as u64).max(1)
}

struct Session<'a, M: ?Sized> {
    model: &'a M,
    std_ctx: GenerationContext,
    conf_ctx: Option<GenerationContext>,
    rng: ChaCha8Rng,
    eos: Option<TokenId>,
    trace: DecodeTrace,
    tokens: Vec<TokenId>,
}

impl<'a, M: LogitModel + ?Sized> Session<'a, M> {
    fn new(model: &'a M, ctx: &GenerationContext, contrast: bool, cfg: &DecodeConfig, trace: DecodeTrace) -> Self {
        Session {
            model,
            std_ctx: ctx.clone(),
            // one permutation per session, reused at every step
            conf_ctx: contrast.then(|| ctx.with_shuffled_image(cfg.rng_seed)),
            rng: sampling_rng(cfg.rng_seed),
            eos: model.vocab().eos(),
            trace,
            tokens: Vec::new(),
        }
    }

    /// Runs up to `max_steps` steps. `combine` maps the pathway logits to
    /// `(l_final, alpha, c)`; `pick` chooses from `l_final`.
    fn run(
        mut self,
        max_steps: usize,
        mut combine: impl FnMut(
            &LogitVector,
            Option<&LogitVector>,
        ) -> Result<(LogitVector, Option<crate::types::GateVector>, Option<f64>)>,
        mut pick: impl FnMut(&LogitVector, &mut ChaCha8Rng) -> Result<TokenId>,
    ) -> Result<DecodeResult> {
        for step in 0..max_steps {
            let start = Instant::now();
            let l_std = next_logits(self.model, &self.std_ctx)?;
            let l_conf = match &self.conf_ctx {
                Some(ctx) => Some(next_logits(self.model, ctx)?),
                None => None,
            };
            let (l_final, alpha, c) = combine(&l_std, l_conf.as_ref())?;
            let chosen = pick(&l_final, &mut self.rng)?;
            self.std_ctx.generated.push(chosen);
            if let Some(ctx) = &mut self.conf_ctx {
                ctx.generated.push(chosen);
            }
            self.tokens.push(chosen);
            self.trace.steps.push(StepRecord {
                step,
                l_std,
                l_conf,
                alpha,
                c,
                l_final,
                chosen,
                nanos: elapsed_nanos(start),
            });
            if Some(chosen) == self.eos {
                break;
            }
        }
        let text = self.model.vocab().decode(&self.tokens);
        Ok(DecodeResult {
            tokens: self.tokens,
            text,
            trace: self.trace,
        })
    }
}

fn filtered_pick(cfg: &DecodeConfig) -> impl FnMut(&LogitVector, &mut ChaCha8Rng) -> Result<TokenId> + '_ {
    move |l_final, rng| match cfg.mode {
        // the maximum always survives the cutoff, so argmax needs no mask
        DecodeMode::GreedyArgmax => Ok(l_final.argmax()),
        DecodeMode::CutoffSample => select_token(&cutoff_filter(l_final, cfg.tau)?, cfg.mode, rng),
    }
}

/// Pivot-gated projection contrast. Each step queries the standard and the
/// patch-shuffled pathway, gates the projection of the standard logits onto
/// the conflict logits, subtracts it, applies the cutoff and selects.
///
/// The shuffle seed and the sampling stream both derive from
/// `cfg.rng_seed`. The end-of-sequence token is never gated.
pub fn rpgd_decode<M: LogitModel + ?Sized>(
    model: &M,
    ctx: &GenerationContext,
    pivots: &PivotTokenSet,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    cfg.check_hyperparameters()?;
    let v = model.vocab().len();
    if pivots.vocab_size() != v {
        return Err(Error::VocabMismatch(format!(
            "pivot set bound to vocabulary of size {}, model has {v}",
            pivots.vocab_size()
        )));
    }
    let mut pivots = pivots.clone();
    if let Some(eos) = model.vocab().eos() {
        pivots.remove(eos);
    }
    let contrast = ctx.image.is_some() || cfg.contrast_without_image;
    let trace = DecodeTrace::new(TraceMethod::Rpgd { delta: cfg.delta }, pivots.iter().collect());
    let session = Session::new(model, ctx, contrast, cfg, trace);
    session.run(
        cfg.max_steps,
        |l_std, l_conf| {
            let Some(l_conf) = l_conf else {
                return Ok((l_std.clone(), None, None));
            };
            let mut gate = init_gate(v, cfg.epsilon)?;
            if !pivots.is_empty() {
                raise_pivot_gate(&mut gate, l_conf, &pivots, cfg.beta, cfg.kappa)?;
            }
            let (l_final, c) = gated_subtract_final(l_std, l_conf, &gate, cfg.delta)?;
            Ok((l_final, Some(gate), Some(c)))
        },
        filtered_pick(cfg),
    )
}

/// Single-pathway argmax decoding; ignores `cfg.mode` and the cutoff.
pub fn greedy_decode<M: LogitModel + ?Sized>(
    model: &M,
    ctx: &GenerationContext,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    let session = Session::new(
        model,
        ctx,
        false,
        cfg,
        DecodeTrace::new(TraceMethod::Greedy, Vec::new()),
    );
    session.run(
        cfg.max_steps,
        |l_std, _| Ok((l_std.clone(), None, None)),
        |l_final, _| Ok(l_final.argmax()),
    )
}

/// Baseline contrast `l_std - lambda * l_conf` against the shuffled pathway,
/// followed by the same cutoff and selection as [`rpgd_decode`].
pub fn linear_contrast_decode<M: LogitModel + ?Sized>(
    model: &M,
    ctx: &GenerationContext,
    lambda: f64,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::range("lambda", "must be finite and >= 0"));
    }
    cfg.check_hyperparameters()?;
    let session = Session::new(
        model,
        ctx,
        true,
        cfg,
        DecodeTrace::new(TraceMethod::Linear { lambda }, Vec::new()),
    );
    session.run(
        cfg.max_steps,
        |l_std, l_conf| {
            let l_conf = l_conf.expect("linear contrast always runs both pathways");
            Ok((linear_subtract(l_std, l_conf, lambda)?, None, None))
        },
        filtered_pick(cfg),
    )
}

pub fn decode<M: LogitModel + ?Sized>(
    model: &M,
    ctx: &GenerationContext,
    method: Method,
    pivots: &PivotTokenSet,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    match method {
        Method::Greedy => greedy_decode(model, ctx, cfg),
        Method::Rpgd => rpgd_decode(model, ctx, pivots, cfg),
        Method::Linear { lambda } => linear_contrast_decode(model, ctx, lambda, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        CountingModel, ImageCondition, ScoreSpec, ScriptRule, ScriptedModel, ScriptedModelSpec, EOS, PIVOT_CLOSE,
        PIVOT_OPEN,
    };
    use crate::shuffle::PatchGrid;

    fn lv(xs: &[f64]) -> LogitVector {
        LogitVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cutoff_at_tau_one_keeps_ties_only() {
        let f = cutoff_filter(&lv(&[0.5, 0.5, -1.0]), 1.0).unwrap();
        assert_eq!(f.as_slice(), &[0.5, 0.5, f64::NEG_INFINITY]);
    }

    #[test]
    fn cutoff_log_threshold() {
        // ln(0.1) = -2.302585..., so -3 falls below the threshold
        let f = cutoff_filter(&lv(&[0.0, -3.0]), 0.1).unwrap();
        assert_eq!(f.as_slice(), &[0.0, f64::NEG_INFINITY]);
        let f = cutoff_filter(&lv(&[0.0, -2.3]), 0.1).unwrap();
        assert_eq!(f.as_slice(), &[0.0, -2.3]);
    }

    #[test]
    fn cutoff_vanishing_tau_keeps_everything() {
        let l = lv(&[3.0, -40.0, 12.5, 0.0]);
        let f = cutoff_filter(&l, f64::MIN_POSITIVE).unwrap();
        assert_eq!(f.as_slice(), l.as_slice());
        assert_eq!(cutoff_filter(&l, 0.0).unwrap_err().field(), Some("tau"));
        assert_eq!(cutoff_filter(&l, 1.5).unwrap_err().field(), Some("tau"));
    }

    #[test]
    fn greedy_selection_is_argmax() {
        let mut rng = sampling_rng(0);
        let f = cutoff_filter(&lv(&[1.0, 3.0, 2.0]), 0.1).unwrap();
        assert_eq!(
            select_token(&f, DecodeMode::GreedyArgmax, &mut rng).unwrap(),
            TokenId(1)
        );
    }

    #[test]
    fn sampling_single_survivor() {
        let mut rng = sampling_rng(11);
        let f = FilteredLogits(vec![5.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        for _ in 0..200 {
            assert_eq!(
                select_token(&f, DecodeMode::CutoffSample, &mut rng).unwrap(),
                TokenId(0)
            );
        }
        let none = FilteredLogits(vec![f64::NEG_INFINITY; 2]);
        assert!(matches!(
            select_token(&none, DecodeMode::CutoffSample, &mut rng),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn sampling_fair_coin_within_three_sigma() {
        // Binomial(10^4, 1/2): sigma = 50, so 3 sigma is +-150 draws = +-0.015;
        // the accepted band [0.47, 0.53] is twice as wide.
        let mut rng = sampling_rng(2024);
        let f = FilteredLogits(vec![0.0, 0.0]);
        let n = 10_000;
        let zeros = (0..n)
            .filter(|_| select_token(&f, DecodeMode::CutoffSample, &mut rng).unwrap() == TokenId(0))
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((0.47..=0.53).contains(&freq), "frequency {freq}");
    }

    #[test]
    fn method_parsing() {
        assert_eq!("greedy".parse::<Method>().unwrap(), Method::Greedy);
        assert_eq!("rpgd".parse::<Method>().unwrap(), Method::Rpgd);
        assert_eq!("linear:0.5".parse::<Method>().unwrap(), Method::Linear { lambda: 0.5 });
        assert!("linear:-1".parse::<Method>().is_err());
        assert!("beam".parse::<Method>().is_err());
        assert_eq!(Method::Linear { lambda: 0.25 }.to_string(), "linear:0.25");
    }

    fn tokens(extra: &[&str]) -> Vec<String> {
        let mut t: Vec<String> = [EOS, PIVOT_OPEN, PIVOT_CLOSE].iter().map(|s| s.to_string()).collect();
        t.extend(extra.iter().map(|s| s.to_string()));
        t
    }

    fn model(vocab: Vec<String>, rules: Vec<ScriptRule>, default: ScoreSpec) -> ScriptedModel {
        ScriptedModel::from_spec(
            &ScriptedModelSpec {
                vocab: Some(vocab),
                vocab_file: None,
                rules,
                default,
            },
            None,
        )
        .unwrap()
    }

    fn cfg(max_steps: usize) -> DecodeConfig {
        DecodeConfig {
            max_steps,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn greedy_constant_logits() {
        // vocabulary [<eos>, <RPivot>, </RPivot>]; scores [0, 9, 0]
        let m = model(tokens(&[]), vec![], ScoreSpec::Dense(vec![0.0, 9.0, 0.0]));
        let out = greedy_decode(&m, &GenerationContext::default(), &cfg(3)).unwrap();
        assert_eq!(out.tokens, vec![TokenId(1); 3]);
        assert_eq!(out.trace.len(), 3);
        assert!(out.trace.steps.iter().all(|s| s.nanos > 0));
        let again = greedy_decode(&m, &GenerationContext::default(), &cfg(3)).unwrap();
        assert_eq!(again.tokens, out.tokens);
    }

    #[test]
    fn greedy_stops_at_eos() {
        let m = model(
            tokens(&["a"]),
            vec![],
            ScoreSpec::Sparse([(EOS.to_string(), 4.0)].into()),
        );
        let out = greedy_decode(&m, &GenerationContext::default(), &cfg(10)).unwrap();
        assert_eq!(out.tokens, vec![TokenId(0)]);
        assert_eq!(out.text, "");
    }

    #[test]
    fn zero_steps_gives_empty_result() {
        let m = model(tokens(&[]), vec![], ScoreSpec::Dense(vec![0.0, 9.0, 0.0]));
        let pivots = PivotTokenSet::empty(3);
        let out = rpgd_decode(&m, &GenerationContext::default(), &pivots, &cfg(0)).unwrap();
        assert!(out.tokens.is_empty());
        assert!(out.trace.is_empty());
    }

    #[test]
    fn linear_contrast_hand_example() {
        // l_std = [2, 1] on the ordered image, l_conf = [3, 0] after shuffling
        let vocab = vec![PIVOT_OPEN.to_string(), PIVOT_CLOSE.to_string()];
        let rules = vec![
            ScriptRule {
                suffix: vec![],
                image: ImageCondition::Ordered,
                logits: ScoreSpec::Dense(vec![2.0, 1.0]),
            },
            ScriptRule {
                suffix: vec![],
                image: ImageCondition::Scrambled,
                logits: ScoreSpec::Dense(vec![3.0, 0.0]),
            },
        ];
        let m = model(vocab, rules, ScoreSpec::Dense(vec![0.0, 0.0]));
        let grid = PatchGrid::from_rows((0..8).map(|i| vec![i as f64]).collect()).unwrap();
        let ctx = GenerationContext::new(vec![], Some(grid));
        let c = DecodeConfig {
            max_steps: 1,
            rng_seed: 5,
            ..DecodeConfig::default()
        };
        assert!(!crate::shuffle::permutation_from_seed(8, 5).unwrap().is_identity());
        let out = linear_contrast_decode(&m, &ctx, 1.0, &c).unwrap();
        assert_eq!(out.trace.steps[0].l_final.as_slice(), &[-1.0, 1.0]);
        assert_eq!(out.tokens, vec![TokenId(1)]);
        let g = greedy_decode(&m, &ctx, &c).unwrap();
        assert_eq!(g.tokens, vec![TokenId(0)]);
        let zero = linear_contrast_decode(&m, &ctx, 0.0, &c).unwrap();
        assert_eq!(zero.tokens, g.tokens);
    }

    #[test]
    fn call_accounting_per_method() {
        let m = CountingModel::new(model(
            tokens(&["x"]),
            vec![],
            ScoreSpec::Dense(vec![0.0, 0.0, 0.0, 1.0]),
        ));
        let ctx = GenerationContext::default();
        let out = greedy_decode(&m, &ctx, &cfg(4)).unwrap();
        assert_eq!(m.calls(), out.tokens.len());
        m.reset();
        let out = rpgd_decode(&m, &ctx, &PivotTokenSet::empty(4), &cfg(4)).unwrap();
        assert_eq!(m.calls(), 2 * out.tokens.len());
        m.reset();
        let out = linear_contrast_decode(&m, &ctx, 0.5, &cfg(4)).unwrap();
        assert_eq!(m.calls(), 2 * out.tokens.len());
        m.reset();
        let no_contrast = DecodeConfig {
            contrast_without_image: false,
            ..cfg(4)
        };
        let out = rpgd_decode(&m, &ctx, &PivotTokenSet::empty(4), &no_contrast).unwrap();
        assert_eq!(m.calls(), out.tokens.len());
    }

    #[test]
    fn pivot_set_must_match_vocabulary() {
        let m = model(tokens(&[]), vec![], ScoreSpec::Dense(vec![0.0, 1.0, 0.0]));
        let err = rpgd_decode(&m, &GenerationContext::default(), &PivotTokenSet::empty(7), &cfg(2)).unwrap_err();
        assert!(matches!(err, Error::VocabMismatch(_)));
    }

    #[test]
    fn eos_is_never_gated() {
        let m = model(tokens(&["x"]), vec![], ScoreSpec::Dense(vec![0.0, 0.0, 0.0, 1.0]));
        let pivots = PivotTokenSet::new(4, [TokenId(0), TokenId(3)]).unwrap();
        let out = rpgd_decode(&m, &GenerationContext::default(), &pivots, &cfg(1)).unwrap();
        assert_eq!(out.trace.pivots, vec![TokenId(3)]);
        assert_eq!(out.trace.steps[0].alpha.as_ref().unwrap().as_slice()[0], 0.1);
    }
}
