//! Discrimination metrics, answer scoring and the experiment harness.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, Method};
use crate::error::{check_len, Error, Result};
use crate::model::{GenerationContext, LogitModel};
use crate::pivot::{normalize_surface, pivot_token_set, AliasTable, PivotSpan};
use crate::synth::ConflictSample;
use crate::trace::DecodeTrace;
use crate::types::{DecodeConfig, TokenId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub r#fn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.r#fn
    }
}

pub fn confusion(pred: &[bool], gold: &[bool]) -> Result<ConfusionCounts> {
    check_len(gold.len(), pred.len())?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.r#fn += 1,
        }
    }
    Ok(c)
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.r#fn as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    let v = (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt();
    v.clamp(-1.0, 1.0)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    f1_from(ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.r#fn))
}

/// Mean of the true positive and true negative rates; a class without
/// gold members contributes a rate of 0.
pub fn balanced_accuracy(c: &ConfusionCounts) -> f64 {
    (ratio(c.tp, c.tp + c.r#fn) + ratio(c.tn, c.tn + c.fp)) / 2.0
}

/// Spans matched one-to-one on passage and normalised surface.
pub fn span_matches(pred: &[PivotSpan], gold: &[PivotSpan]) -> usize {
    let mut pool: HashMap<(usize, String), usize> = HashMap::new();
    for g in gold {
        *pool.entry((g.passage, normalize_surface(&g.text))).or_default() += 1;
    }
    pred.iter()
        .filter(|p| {
            pool.get_mut(&(p.passage, normalize_surface(&p.text))).is_some_and(|n| {
                *n > 0 && {
                    *n -= 1;
                    true
                }
            })
        })
        .count()
}

/// Micro F1 over spans. Two empty sets agree perfectly.
pub fn span_f1(pred: &[PivotSpan], gold: &[PivotSpan]) -> f64 {
    span_f1_counts(span_matches(pred, gold), pred.len(), gold.len())
}

fn span_f1_counts(matched: usize, pred: usize, gold: usize) -> f64 {
    if pred == 0 && gold == 0 {
        return 1.0;
    }
    f1_from(ratio(matched as u64, pred as u64), ratio(matched as u64, gold as u64))
}

/// Lowercase, punctuation and English articles removed, whitespace
/// collapsed.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn answer_matches(output: &str, gold: &str) -> bool {
    normalize_answer(output) == normalize_answer(gold)
}

pub fn render_prompt(sample: &ConflictSample) -> String {
    format!(
        "Context: {} Question: {} Answer:",
        sample.passages.join(" "),
        sample.question
    )
}

pub fn sample_context<M: LogitModel + ?Sized>(
    model: &M,
    sample: &ConflictSample,
    base_dir: Option<&Path>,
) -> Result<GenerationContext> {
    let prompt = model.tokenize(&render_prompt(sample))?;
    let image = sample.image.as_ref().map(|i| i.load(base_dir)).transpose()?;
    Ok(GenerationContext::new(prompt, image))
}

/// The decode configuration of one sample: the run seed mixed with its id.
pub fn sample_config(cfg: &DecodeConfig, sample_id: u64) -> DecodeConfig {
    DecodeConfig {
        rng_seed: cfg.rng_seed ^ sample_id,
        ..cfg.clone()
    }
}

/// One line of a decode results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub sample_id: u64,
    pub method: String,
    pub output: String,
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub sample_id: u64,
    pub method: String,
    pub tokens: usize,
    pub nanos: u64,
}

pub struct DecodeOutput {
    pub record: DecodeRecord,
    pub timing: Option<TimingRecord>,
    pub trace: Option<DecodeTrace>,
}

/// Decodes one sample. Failures end up in the record rather than the
/// return value.
pub fn decode_sample<M: LogitModel + ?Sized>(
    model: &M,
    sample: &ConflictSample,
    method: Method,
    cfg: &DecodeConfig,
    base_dir: Option<&Path>,
) -> DecodeOutput {
    let run = || -> Result<_> {
        let ctx = sample_context(model, sample, base_dir)?;
        let pivots = pivot_token_set(&sample.spans, model)?;
        decode(model, &ctx, method, &pivots.set, &sample_config(cfg, sample.sample_id))
    };
    let method_name = method.to_string();
    match run() {
        Ok(res) => DecodeOutput {
            record: DecodeRecord {
                sample_id: sample.sample_id,
                method: method_name.clone(),
                output: res.text,
                tokens: res.tokens.clone(),
                error: None,
            },
            timing: Some(TimingRecord {
                sample_id: sample.sample_id,
                method: method_name,
                tokens: res.tokens.len(),
                nanos: res.trace.total_nanos(),
            }),
            trace: Some(res.trace),
        },
        Err(e) => DecodeOutput {
            record: DecodeRecord {
                sample_id: sample.sample_id,
                method: method_name,
                output: String::new(),
                tokens: Vec::new(),
                error: Some(e.to_string()),
            },
            timing: None,
            trace: None,
        },
    }
}

/// Decodes every sample on the current rayon pool; output is ordered by
/// sample id.
pub fn decode_corpus<M: LogitModel + ?Sized>(
    model: &M,
    corpus: &[ConflictSample],
    method: Method,
    cfg: &DecodeConfig,
    base_dir: Option<&Path>,
) -> Vec<DecodeOutput> {
    let mut out: Vec<DecodeOutput> = corpus
        .par_iter()
        .map(|s| decode_sample(model, s, method, cfg, base_dir))
        .collect();
    out.sort_by_key(|o| o.record.sample_id);
    out
}

/// External conflict verdict for one sample, optionally with predicted
/// pivot spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictPrediction {
    pub sample_id: u64,
    pub conflict: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<PivotSpan>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub samples: usize,
    pub correct: usize,
    pub errors: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub sample_id: u64,
    pub method: String,
    pub output: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictVerdict {
    pub sample_id: u64,
    pub predicted: bool,
    pub gold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrimination {
    pub counts: ConfusionCounts,
    pub mcc: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    /// Present when span predictions were supplied.
    pub span_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub method: String,
    pub samples: usize,
    pub median_ns_per_token: f64,
    pub mean_ns_per_token: f64,
    pub ratio_vs_greedy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<DecodeConfig>,
    pub methods: Vec<MethodSummary>,
    pub discrimination: Discrimination,
    pub verdicts: Vec<SampleVerdict>,
    pub conflict_verdicts: Vec<ConflictVerdict>,
    /// Wall-clock figures; never part of the reproducible body.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Vec<LatencyRow>>,
}

pub fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    })
}

/// Per-method token latency; ratios are taken against the `greedy` row.
pub fn latency_rows(timings: &[TimingRecord]) -> Vec<LatencyRow> {
    let mut per: Vec<(String, Vec<f64>)> = Vec::new();
    for t in timings.iter().filter(|t| t.tokens > 0) {
        let v = t.nanos as f64 / t.tokens as f64;
        match per.iter_mut().find(|(m, _)| *m == t.method) {
            Some((_, xs)) => xs.push(v),
            None => per.push((t.method.clone(), vec![v])),
        }
    }
    let mut rows: Vec<LatencyRow> = per
        .into_iter()
        .map(|(method, mut xs)| LatencyRow {
            samples: xs.len(),
            mean_ns_per_token: xs.iter().sum::<f64>() / xs.len() as f64,
            median_ns_per_token: median(&mut xs).expect("non-empty"),
            ratio_vs_greedy: None,
            method,
        })
        .collect();
    if let Some(base) = rows
        .iter()
        .find(|r| r.method == "greedy")
        .map(|r| r.median_ns_per_token)
    {
        for r in &mut rows {
            r.ratio_vs_greedy = Some(r.median_ns_per_token / base);
        }
    }
    rows
}

/// Scores decode records against the corpus. Methods keep their order of
/// first appearance; verdicts follow sample id order.
pub fn build_report(
    corpus: &[ConflictSample],
    records: &[DecodeRecord],
    predictions: Option<&[ConflictPrediction]>,
    aliases: &AliasTable,
) -> Result<EvalReport> {
    let mut samples: Vec<&ConflictSample> = corpus.iter().collect();
    samples.sort_by_key(|s| s.sample_id);
    let known: BTreeMap<u64, &ConflictSample> = samples.iter().map(|s| (s.sample_id, *s)).collect();

    let mut methods: Vec<String> = Vec::new();
    let mut by_key: HashMap<(String, u64), &DecodeRecord> = HashMap::new();
    for r in records {
        if !known.contains_key(&r.sample_id) {
            return Err(Error::Validation(format!("result for unknown sample {}", r.sample_id)));
        }
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        if by_key.insert((r.method.clone(), r.sample_id), r).is_some() {
            return Err(Error::Validation(format!(
                "duplicate result for sample {} / {}",
                r.sample_id, r.method
            )));
        }
    }

    let mut verdicts = Vec::new();
    let mut summaries = Vec::new();
    for method in &methods {
        let mut summary = MethodSummary {
            method: method.clone(),
            samples: samples.len(),
            correct: 0,
            errors: 0,
            accuracy: 0.0,
        };
        for s in &samples {
            let verdict = match by_key.get(&(method.clone(), s.sample_id)) {
                Some(r) => SampleVerdict {
                    sample_id: s.sample_id,
                    method: method.clone(),
                    output: r.output.clone(),
                    correct: r.error.is_none() && answer_matches(&r.output, &s.answer),
                    error: r.error.clone(),
                },
                None => SampleVerdict {
                    sample_id: s.sample_id,
                    method: method.clone(),
                    output: String::new(),
                    correct: false,
                    error: Some("missing result".into()),
                },
            };
            summary.correct += usize::from(verdict.correct);
            summary.errors += usize::from(verdict.error.is_some());
            verdicts.push(verdict);
        }
        summary.accuracy = ratio(summary.correct as u64, summary.samples as u64);
        summaries.push(summary);
    }

    let external: Option<HashMap<u64, &ConflictPrediction>> =
        predictions.map(|ps| ps.iter().map(|p| (p.sample_id, p)).collect());
    let mut conflict_verdicts = Vec::with_capacity(samples.len());
    let (mut matched, mut n_pred, mut n_gold, mut have_spans) = (0, 0, 0, false);
    for s in &samples {
        let predicted = match &external {
            Some(map) => {
                let p = map
                    .get(&s.sample_id)
                    .ok_or_else(|| Error::Validation(format!("no prediction for sample {}", s.sample_id)))?;
                if let Some(spans) = &p.spans {
                    have_spans = true;
                    matched += span_matches(spans, &s.spans);
                    n_pred += spans.len();
                }
                n_gold += s.spans.len();
                p.conflict
            }
            None => !s.conflicting_pivots(aliases)?.is_empty(),
        };
        conflict_verdicts.push(ConflictVerdict {
            sample_id: s.sample_id,
            predicted,
            gold: s.label.is_conflict(),
        });
    }
    let pred: Vec<bool> = conflict_verdicts.iter().map(|v| v.predicted).collect();
    let gold: Vec<bool> = conflict_verdicts.iter().map(|v| v.gold).collect();
    let counts = confusion(&pred, &gold)?;
    let discrimination = Discrimination {
        counts,
        mcc: mcc(&counts),
        f1: f1(&counts),
        balanced_accuracy: balanced_accuracy(&counts),
        span_f1: have_spans.then(|| span_f1_counts(matched, n_pred, n_gold)),
    };

    Ok(EvalReport {
        seed: None,
        config: None,
        methods: summaries,
        discrimination,
        verdicts,
        conflict_verdicts,
        latency: None,
    })
}

/// Decodes the corpus with every method and scores the results.
pub fn run_experiment<M: LogitModel + ?Sized>(
    corpus: &[ConflictSample],
    model: &M,
    methods: &[Method],
    cfg: &DecodeConfig,
    base_dir: Option<&Path>,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::Config("no decoding methods given".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Validation("empty corpus".into()));
    }
    cfg.check_hyperparameters()?;
    let mut records = Vec::new();
    let mut timings = Vec::new();
    for &method in methods {
        for out in decode_corpus(model, corpus, method, cfg, base_dir) {
            records.push(out.record);
            timings.extend(out.timing);
        }
    }
    let mut report = build_report(corpus, &records, None, &AliasTable::new())?;
    report.seed = Some(cfg.rng_seed);
    report.config = Some(cfg.clone());
    report.latency = Some(latency_rows(&timings));
    Ok(report)
}

impl EvalReport {
    /// Pretty JSON without the latency section.
    pub fn body_json(&self) -> Result<String> {
        let body = EvalReport {
            latency: None,
            ..self.clone()
        };
        Ok(serde_json::to_string_pretty(&body)? + "\n")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Aligned plain-text tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = self
            .methods
            .iter()
            .map(|m| m.method.len())
            .max()
            .unwrap_or(0)
            .max("method".len());
        let _ = writeln!(
            out,
            "{:<w$}  {:>7}  {:>7}  {:>6}  {:>8}",
            "method", "samples", "correct", "errors", "accuracy"
        );
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{:<w$}  {:>7}  {:>7}  {:>6}  {:>8.4}",
                m.method, m.samples, m.correct, m.errors, m.accuracy
            );
        }
        let d = &self.discrimination;
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "conflict discrimination  tp={} tn={} fp={} fn={}",
            d.counts.tp, d.counts.tn, d.counts.fp, d.counts.r#fn
        );
        let _ = writeln!(out, "  mcc               {:>8.4}", d.mcc);
        let _ = writeln!(out, "  f1                {:>8.4}", d.f1);
        let _ = writeln!(out, "  balanced accuracy {:>8.4}", d.balanced_accuracy);
        if let Some(s) = d.span_f1 {
            let _ = writeln!(out, "  span f1           {s:>8.4}");
        }
        if let Some(rows) = &self.latency {
            let _ = writeln!(out);
            let _ = writeln!(
                out,
                "{:<w$}  {:>14}  {:>14}  {:>8}",
                "method", "median ns/tok", "mean ns/tok", "ratio"
            );
            for r in rows {
                let ratio = r.ratio_vs_greedy.map_or_else(|| "-".to_owned(), |x| format!("{x:.3}"));
                let _ = writeln!(
                    out,
                    "{:<w$}  {:>14.1}  {:>14.1}  {:>8}",
                    r.method, r.median_ns_per_token, r.mean_ns_per_token, ratio
                );
            }
        }
        out
    }

    /// Per-sample answer verdicts as CSV.
    pub fn verdicts_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(["sample_id", "method", "correct", "output", "error"])
            .map_err(csv_err)?;
        for v in &self.verdicts {
            w.write_record([
                v.sample_id.to_string(),
                v.method.clone(),
                v.correct.to_string(),
                v.output.clone(),
                v.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::conflict_rescue_corpus;
    use crate::model::{ScoreSpec, ScriptRule, ScriptedModel, ScriptedModelSpec, EOS, PIVOT_CLOSE, PIVOT_OPEN, UNK};
    use crate::pivot::PivotId;
    use crate::synth::tests_support::landmark_sample;
    use proptest::prelude::*;

    fn cc(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, tn, fp, r#fn: fn_ }
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[true, false], &[true, false]).unwrap(), cc(1, 1, 0, 0));
        assert_eq!(
            confusion(&[true, true, false, false], &[true, false, true, false]).unwrap(),
            cc(1, 1, 1, 1)
        );
        assert_eq!(confusion(&[], &[]).unwrap(), cc(0, 0, 0, 0));
        assert!(matches!(confusion(&[true], &[]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mcc(&cc(3, 4, 0, 0)), 1.0);
        assert_eq!(mcc(&cc(1, 1, 1, 1)), 0.0);
        assert_eq!(mcc(&cc(2, 0, 2, 0)), 0.0);
        assert_eq!(f1(&cc(3, 4, 0, 0)), 1.0);
        assert_eq!(f1(&cc(1, 0, 1, 1)), 0.5);
        assert_eq!(f1(&cc(0, 5, 2, 3)), 0.0);
        assert_eq!(balanced_accuracy(&cc(3, 4, 0, 0)), 1.0);
        assert_eq!(balanced_accuracy(&cc(3, 2, 2, 1)), 0.625);
        assert_eq!(balanced_accuracy(&cc(5, 0, 5, 0)), 0.5);
    }

    fn span(p: usize, t: &str) -> PivotSpan {
        PivotSpan {
            passage: p,
            pivot: PivotId::Answer,
            start: 0,
            end: t.chars().count(),
            text: t.into(),
        }
    }

    #[test]
    fn span_f1_examples() {
        let gold = vec![span(0, "Spain"), span(1, "Italy")];
        assert_eq!(span_f1(&gold, &gold), 1.0);
        assert_eq!(span_f1(&[], &gold), 0.0);
        assert_eq!(span_f1(&[span(0, " spain "), span(2, "Italy")], &gold), 0.5);
        assert_eq!(span_f1(&[span(0, "Spain"), span(0, "Spain")], &gold[..1]), 2.0 / 3.0);
    }

    #[test]
    fn answer_normalisation() {
        assert_eq!(normalize_answer("  The  Statue of Liberty!"), "statue of liberty");
        assert!(answer_matches("an Italian.", "italian"));
        assert!(!answer_matches("Spanish", "Italian"));
    }

    fn brute(pred: &[bool], gold: &[bool]) -> (f64, f64, f64) {
        let n = |p: bool, g: bool| pred.iter().zip(gold).filter(|(&a, &b)| a == p && b == g).count() as f64;
        let (tp, tn, fp, fn_) = (n(true, true), n(false, false), n(true, false), n(false, true));
        let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        let m = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den };
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let tpr = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        let tnr = if tn + fp == 0.0 { 0.0 } else { tn / (tn + fp) };
        (m, f, (tpr + tnr) / 2.0)
    }

    fn labels() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
        (0usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force((pred, gold) in labels()) {
            let c = confusion(&pred, &gold).unwrap();
            prop_assert_eq!(c.total() as usize, pred.len());
            let (m, f, b) = brute(&pred, &gold);
            prop_assert!((mcc(&c) - m).abs() <= 1e-12);
            prop_assert!((f1(&c) - f).abs() <= 1e-12);
            prop_assert!((balanced_accuracy(&c) - b).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&mcc(&c)));
            prop_assert!((0.0..=1.0).contains(&f1(&c)) && (0.0..=1.0).contains(&balanced_accuracy(&c)));
        }

        #[test]
        fn label_swap_symmetry((pred, gold) in labels()) {
            let c = confusion(&pred, &gold).unwrap();
            let np: Vec<bool> = pred.iter().map(|x| !x).collect();
            let ng: Vec<bool> = gold.iter().map(|x| !x).collect();
            prop_assert!((mcc(&confusion(&np, &ng).unwrap()) - mcc(&c)).abs() <= 1e-12);
            if c.tp > 0 && c.tn > 0 && c.fp > 0 && c.r#fn > 0 {
                prop_assert!((mcc(&confusion(&np, &gold).unwrap()) + mcc(&c)).abs() <= 1e-12);
            }
        }
    }

    fn echo_model(answer: &str) -> ScriptedModel {
        let vocab: Vec<String> = [EOS, UNK, PIVOT_OPEN, PIVOT_CLOSE, answer, ":"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        ScriptedModel::from_spec(
            &ScriptedModelSpec {
                vocab: Some(vocab),
                vocab_file: None,
                rules: vec![ScriptRule {
                    suffix: vec![":".into()],
                    image: Default::default(),
                    logits: ScoreSpec::Sparse(BTreeMap::from([(answer.to_owned(), 5.0)])),
                }],
                default: ScoreSpec::Sparse(BTreeMap::from([(EOS.to_owned(), 5.0)])),
            },
            None,
        )
        .unwrap()
    }

    #[test]
    fn single_sample_greedy_self_ratio() {
        let sample = landmark_sample();
        let model = echo_model("Paris");
        let report = run_experiment(&[sample], &model, &[Method::Greedy], &DecodeConfig::default(), None).unwrap();
        assert_eq!(report.method("greedy").unwrap().accuracy, 1.0);
        let lat = report.latency.as_ref().unwrap();
        assert_eq!(lat[0].ratio_vs_greedy, Some(1.0));
    }

    #[test]
    fn empty_methods_is_config_error() {
        let model = echo_model("Paris");
        let err = run_experiment(&[landmark_sample()], &model, &[], &DecodeConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn rpgd_beats_greedy_on_rescue_corpus() {
        let corpus = conflict_rescue_corpus(10, 5);
        let model = ScriptedModel::from_spec(&corpus.model, None).unwrap();
        let report = run_experiment(
            &corpus.samples,
            &model,
            &[Method::Greedy, Method::Rpgd],
            &DecodeConfig::default(),
            None,
        )
        .unwrap();
        let g = report.method("greedy").unwrap().accuracy;
        let r = report.method("rpgd").unwrap().accuracy;
        assert_eq!(g, 0.5);
        assert_eq!(r, 1.0);
        assert_eq!(report.discrimination.counts.tp, 10);
    }

    #[test]
    fn report_body_is_reproducible() {
        let corpus = conflict_rescue_corpus(6, 2);
        let model = ScriptedModel::from_spec(&corpus.model, None).unwrap();
        let cfg = DecodeConfig {
            rng_seed: 11,
            ..DecodeConfig::default()
        };
        let methods = [Method::Greedy, Method::Rpgd, Method::Linear { lambda: 0.5 }];
        let a = run_experiment(&corpus.samples, &model, &methods, &cfg, None).unwrap();
        let b = run_experiment(&corpus.samples, &model, &methods, &cfg, None).unwrap();
        assert_eq!(a.body_json().unwrap(), b.body_json().unwrap());
        assert!(!a.body_json().unwrap().contains("latency"));
        assert!(a.to_text().contains("rpgd"));
        let csv = a.verdicts_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 3 * 6);
    }

    #[test]
    fn report_from_records_and_predictions() {
        let s = landmark_sample();
        let records = vec![
            DecodeRecord {
                sample_id: 7,
                method: "greedy".into(),
                output: "Paris".into(),
                tokens: vec![],
                error: None,
            },
            DecodeRecord {
                sample_id: 7,
                method: "rpgd".into(),
                output: String::new(),
                tokens: vec![],
                error: Some("boom".into()),
            },
        ];
        let preds = vec![ConflictPrediction {
            sample_id: 7,
            conflict: true,
            spans: Some(s.spans.clone()),
        }];
        let r = build_report(std::slice::from_ref(&s), &records, Some(&preds), &AliasTable::new()).unwrap();
        assert_eq!(r.methods[0].accuracy, 1.0);
        assert_eq!(r.methods[1].errors, 1);
        assert_eq!(r.discrimination.counts, cc(0, 0, 1, 0));
        assert_eq!(r.discrimination.span_f1, Some(1.0));
        let bad = vec![DecodeRecord {
            sample_id: 99,
            ..records[0].clone()
        }];
        assert!(build_report(&[s], &bad, None, &AliasTable::new()).is_err());
    }

    #[test]
    fn latency_rows_use_median() {
        let t = |m: &str, nanos| TimingRecord {
            sample_id: 0,
            method: m.into(),
            tokens: 2,
            nanos,
        };
        let rows = latency_rows(&[t("greedy", 10), t("greedy", 30), t("greedy", 1000), t("rpgd", 60)]);
        assert_eq!(rows[0].median_ns_per_token, 15.0);
        assert_eq!(rows[1].ratio_vs_greedy, Some(2.0));
    }
}
