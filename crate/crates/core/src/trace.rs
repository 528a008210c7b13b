//! Per-step decode records and their JSONL export.

use serde::{Deserialize, Serialize};

use crate::contrast::{gated_subtract, linear_subtract};
use crate::error::{Error, Result};
use crate::model::Vocabulary;
use crate::types::{GateVector, LogitVector, TokenId};

/// How `l_final` was derived from the stored step inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TraceMethod {
    Greedy,
    Rpgd { delta: f64 },
    Linear { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_std: LogitVector,
    /// Absent when the step used the standard pathway only.
    pub l_conf: Option<LogitVector>,
    pub alpha: Option<GateVector>,
    pub c: Option<f64>,
    pub l_final: LogitVector,
    pub chosen: TokenId,
    /// Wall time of the whole step, model calls included. Always >= 1.
    pub nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub method: TraceMethod,
    /// Pivot tokens whose gate was raised, ascending.
    pub pivots: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
}

impl DecodeTrace {
    pub fn new(method: TraceMethod, pivots: Vec<TokenId>) -> Self {
        DecodeTrace {
            method,
            pivots,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_nanos(&self) -> u64 {
        self.steps.iter().map(|s| s.nanos).sum()
    }

    /// Recomputes `l_final` of `record` from its stored inputs.
    pub fn recompute_final(&self, record: &StepRecord) -> Result<LogitVector> {
        let Some(l_conf) = &record.l_conf else {
            return Ok(record.l_std.clone());
        };
        match self.method {
            TraceMethod::Greedy => Ok(record.l_std.clone()),
            TraceMethod::Linear { lambda } => linear_subtract(&record.l_std, l_conf, lambda),
            TraceMethod::Rpgd { delta } => {
                let alpha = record
                    .alpha
                    .as_ref()
                    .ok_or_else(|| Error::Validation(format!("step {} has no gate", record.step)))?;
                let (l_final, proj) = gated_subtract(&record.l_std, l_conf, alpha, delta)?;
                if Some(proj.c) != record.c {
                    return Err(Error::Validation(format!(
                        "step {}: stored c {:?} differs from recomputed {}",
                        record.step, record.c, proj.c
                    )));
                }
                Ok(l_final)
            }
        }
    }

    /// One export line per step.
    pub fn export_lines(
        &self,
        vocab: &Vocabulary,
        top_k: usize,
        sample_id: Option<u64>,
        method: &str,
    ) -> Vec<TraceLine> {
        self.steps
            .iter()
            .map(|s| TraceLine {
                sample_id,
                method: method.to_owned(),
                step: s.step,
                chosen_id: s.chosen,
                chosen_token: vocab.token(s.chosen).unwrap_or_default().to_owned(),
                c: s.c,
                alpha_pivot_mean: s.alpha.as_ref().and_then(|a| pivot_mean(a, &self.pivots)),
                top_std: top_k_entries(&s.l_std, vocab, top_k),
                top_conf: s.l_conf.as_ref().map(|l| top_k_entries(l, vocab, top_k)),
                top_final: top_k_entries(&s.l_final, vocab, top_k),
            })
            .collect()
    }
}

fn pivot_mean(alpha: &GateVector, pivots: &[TokenId]) -> Option<f64> {
    if pivots.is_empty() {
        return None;
    }
    let sum: f64 = pivots.iter().map(|p| alpha.as_slice()[p.index()]).sum();
    Some(sum / pivots.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub id: TokenId,
    pub token: String,
    pub logit: f64,
}

/// Highest `k` scores, ties broken by lower id.
pub fn top_k_entries(l: &LogitVector, vocab: &Vocabulary, k: usize) -> Vec<TopEntry> {
    let mut idx: Vec<usize> = (0..l.len()).collect();
    let xs = l.as_slice();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter()
        .map(|i| {
            let id = TokenId(i as u32);
            TopEntry {
                id,
                token: vocab.token(id).unwrap_or_default().to_owned(),
                logit: xs[i],
            }
        })
        .collect()
}

/// JSONL trace record. Timing is left out so that exports of identical
/// runs compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub sample_id: Option<u64>,
    pub method: String,
    pub step: usize,
    pub chosen_id: TokenId,
    pub chosen_token: String,
    pub c: Option<f64>,
    pub alpha_pivot_mean: Option<f64>,
    pub top_std: Vec<TopEntry>,
    pub top_conf: Option<Vec<TopEntry>>,
    pub top_final: Vec<TopEntry>,
}
