//! Deterministic scripted corpora for tests and demos.

use std::collections::BTreeMap;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ImageCondition, ScoreSpec, ScriptRule, ScriptedModelSpec, EOS, PIVOT_CLOSE, PIVOT_OPEN, UNK};
use crate::pivot::{PivotId, PivotSpan, ReasoningChain};
use crate::shuffle::PatchGrid;
use crate::synth::{ConflictLabel, ConflictSample, ImageRef};

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit(rng)
}

/// Standard normal draw via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - unit(rng);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// `rows x dim` patches with rows in ascending lexicographic order.
pub fn sorted_image(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> PatchGrid {
    let mut data: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..dim).map(|_| uniform(rng, -1.0, 1.0)).collect())
        .collect();
    data.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    PatchGrid::from_rows(data).expect("non-empty finite grid")
}

pub struct ScriptedCorpus {
    pub model: ScriptedModelSpec,
    pub samples: Vec<ConflictSample>,
}

const FILLER: [&str; 3] = [
    "This archive entry has no further detail .",
    "The catalogue page was scanned twice .",
    "Nothing else is recorded here .",
];

fn question_token(i: usize) -> String {
    format!("q{i:03}")
}

fn answer_token(j: usize) -> String {
    format!("ans{j:03}")
}

/// `n` samples in which the patch-shuffled pathway adds `+4` to a wrong
/// answer token at the answer step.
///
/// With the ordered image the correct token `a` and the wrong token `w`
/// share the top score `s0` in `[4, 8]` while every other token sits in
/// `[-2, 1]`. Argmax breaks the tie towards the lower id, which is `a` for
/// even samples and `w` for odd ones, so greedy decoding is right exactly
/// half the time. Both tokens are pivots; since `w` carries the larger
/// conflict logit its gate is larger, and the projection coefficient lies
/// in `(0, 1)`, which leaves `a` strictly on top after subtraction.
pub fn conflict_rescue_corpus(n: usize, seed: u64) -> ScriptedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab: Vec<String> = [
        EOS,
        UNK,
        PIVOT_OPEN,
        PIVOT_CLOSE,
        "Context",
        "Question",
        "Answer",
        ":",
        "?",
        ".",
        "nationality",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for text in [
        "What is the nationality of",
        "The subject is",
        "Another source says",
        "This archive entry has no further detail",
        "The catalogue page was scanned twice",
        "Nothing else is recorded here",
    ] {
        for w in text.split(' ') {
            if !vocab.iter().any(|v| v == w) {
                vocab.push(w.to_owned());
            }
        }
    }
    vocab.extend((0..n).map(question_token));
    vocab.extend((0..2 * n).map(answer_token));
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    let mut rules = Vec::with_capacity(2 * n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let q = question_token(i);
        let (correct, wrong) = if i % 2 == 0 {
            (answer_token(2 * i), answer_token(2 * i + 1))
        } else {
            (answer_token(2 * i + 1), answer_token(2 * i))
        };
        let s0 = uniform(&mut rng, 4.0, 8.0);
        let mut ordered: Vec<f64> = (0..vocab.len()).map(|_| uniform(&mut rng, -2.0, 1.0)).collect();
        ordered[index[correct.as_str()]] = s0;
        ordered[index[wrong.as_str()]] = s0;
        let mut scrambled = ordered.clone();
        scrambled[index[wrong.as_str()]] += 4.0;
        let suffix: Vec<String> = [q.as_str(), "?", "Answer", ":"].iter().map(|s| s.to_string()).collect();
        rules.push(ScriptRule {
            suffix: suffix.clone(),
            image: ImageCondition::Ordered,
            logits: ScoreSpec::Dense(ordered),
        });
        rules.push(ScriptRule {
            suffix,
            image: ImageCondition::Scrambled,
            logits: ScoreSpec::Dense(scrambled),
        });

        let gold = format!("The subject {q} is {correct} .");
        let conflicting = format!("Another source says {q} is {wrong} .");
        let passages = vec![
            gold.clone(),
            conflicting.clone(),
            FILLER[0].to_owned(),
            FILLER[1].to_owned(),
            FILLER[2].to_owned(),
        ];
        let spans = vec![
            PivotSpan::locate(0, PivotId::Node(0), &gold, &q, 0).expect("question token present"),
            PivotSpan::locate(0, PivotId::Answer, &gold, &correct, 0).expect("answer present"),
            PivotSpan::locate(1, PivotId::Node(0), &conflicting, &q, 0).expect("question token present"),
            PivotSpan::locate(1, PivotId::Answer, &conflicting, &wrong, 0).expect("answer present"),
        ];
        samples.push(ConflictSample {
            sample_id: i as u64,
            question: format!("What is the nationality of {q} ?"),
            image: Some(ImageRef::Inline {
                patches: sorted_image(&mut rng, 16, 4),
            }),
            passages,
            chain: ReasoningChain::new(vec![q.clone(), correct.clone()], vec!["nationality".into()])
                .expect("two nodes, one edge"),
            spans,
            label: ConflictLabel::HighConflict,
            answer: correct,
        });
    }
    let model = ScriptedModelSpec {
        vocab: Some(vocab),
        vocab_file: None,
        rules,
        default: ScoreSpec::Sparse(BTreeMap::from([(EOS.to_owned(), 10.0)])),
    };
    ScriptedCorpus { model, samples }
}

/// Word-chain model over `words` plain tokens: each word's next-token
/// scores are a fixed Gaussian draw, and the end token competes with them.
pub fn random_scripted_model(words: usize, seed: u64) -> ScriptedModelSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vocab: Vec<String> = [EOS, UNK, PIVOT_OPEN, PIVOT_CLOSE]
        .iter()
        .map(|s| s.to_string())
        .collect();
    vocab.extend((0..words).map(|w| format!("w{w:02}")));
    let v = vocab.len();
    let rules = (4..v)
        .map(|t| {
            let mut scores = normal_vec(&mut rng, v);
            scores[0] += 1.5;
            ScriptRule {
                suffix: vec![vocab[t].clone()],
                image: ImageCondition::Any,
                logits: ScoreSpec::Dense(scores),
            }
        })
        .collect();
    let default = ScoreSpec::Dense(normal_vec(&mut rng, v));
    ScriptedModelSpec {
        vocab: Some(vocab),
        vocab_file: None,
        rules,
        default,
    }
}

/// `n` prompts of 1 to 4 plain words for [`random_scripted_model`].
pub fn random_prompts(n: usize, words: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = 1 + (rng.next_u64() % 4) as usize;
            (0..len)
                .map(|_| format!("w{:02}", rng.next_u64() % words as u64))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
