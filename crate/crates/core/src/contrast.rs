//! Gate construction and projection-based gated subtraction.
//!
//! The standard pathway logits are decomposed against the conflict pathway
//! logits: only the component of `l_std` collinear with `l_conf` is removed,
//! and the removal is scaled per token by a gate that starts at a global
//! baseline and rises on pivot tokens with the conflict pathway's own score.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::types::{GateVector, LogitVector, PivotTokenSet};

/// Scalar projection coefficient together with the projected component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub c: f64,
    pub l_proj: LogitVector,
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate with every entry at the baseline `epsilon`.
pub fn init_gate(vocab_size: usize, epsilon: f64) -> Result<GateVector> {
    if vocab_size == 0 {
        return Err(Error::range("vocab_size", "must be positive"));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::range("epsilon", "must be finite and >= 0"));
    }
    Ok(GateVector(vec![epsilon; vocab_size]))
}

/// Raises the gate on pivot tokens: `alpha[v] + beta * sigmoid(kappa * l_conf[v])`
/// for `v` in `pivots`, other entries copied. The input gate is untouched.
pub fn apply_pivot_gate(
    gate: &GateVector,
    l_conf: &LogitVector,
    pivots: &PivotTokenSet,
    beta: f64,
    kappa: f64,
) -> Result<GateVector> {
    let mut alpha = gate.clone();
    raise_pivot_gate(&mut alpha, l_conf, pivots, beta, kappa)?;
    Ok(alpha)
}

/// In-place form of [`apply_pivot_gate`].
pub(crate) fn raise_pivot_gate(
    gate: &mut GateVector,
    l_conf: &LogitVector,
    pivots: &PivotTokenSet,
    beta: f64,
    kappa: f64,
) -> Result<()> {
    check_len(gate.len(), l_conf.len())?;
    let alpha = &mut gate.0;
    for id in pivots.iter() {
        let v = id.index();
        if v >= alpha.len() {
            return Err(Error::IndexOutOfRange {
                index: v,
                vocab_size: alpha.len(),
            });
        }
        alpha[v] += beta * sigmoid(kappa * l_conf.as_slice()[v]);
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::range("delta", "must be finite and > 0"))
    }
}

/// `<l_std, l_conf> / (||l_conf||^2 + delta)`.
pub fn projection_coefficient(l_std: &LogitVector, l_conf: &LogitVector, delta: f64) -> Result<f64> {
    check_len(l_std.len(), l_conf.len())?;
    check_delta(delta)?;
    let conf = l_conf.as_slice();
    Ok(dot(l_std.as_slice(), conf) / (dot(conf, conf) + delta))
}

/// Projects `l_std` onto `l_conf` and subtracts the gated projection:
/// `l_final[v] = l_std[v] - alpha[v] * c * l_conf[v]`.
pub fn gated_subtract(
    l_std: &LogitVector,
    l_conf: &LogitVector,
    gate: &GateVector,
    delta: f64,
) -> Result<(LogitVector, ProjectionResult)> {
    check_len(l_std.len(), gate.len())?;
    let c = projection_coefficient(l_std, l_conf, delta)?;
    let l_proj = LogitVector::new(l_conf.as_slice().iter().map(|x| c * x).collect())?;
    let l_final = subtract_gated(l_std, &l_proj, gate)?;
    Ok((l_final, ProjectionResult { c, l_proj }))
}

/// [`gated_subtract`] without materialising the projection vector; the
/// result is bit-identical.
pub(crate) fn gated_subtract_final(
    l_std: &LogitVector,
    l_conf: &LogitVector,
    gate: &GateVector,
    delta: f64,
) -> Result<(LogitVector, f64)> {
    check_len(l_std.len(), gate.len())?;
    let c = projection_coefficient(l_std, l_conf, delta)?;
    let l_final = l_std
        .as_slice()
        .iter()
        .zip(l_conf.as_slice())
        .zip(gate.as_slice())
        .map(|((s, x), a)| s - a * (c * x))
        .collect();
    Ok((LogitVector::new(l_final)?, c))
}

/// Gated subtraction with the projection step bypassed: the whole conflict
/// vector is removed, `l_final[v] = l_std[v] - alpha[v] * l_conf[v]`.
pub fn gated_subtract_unprojected(l_std: &LogitVector, l_conf: &LogitVector, gate: &GateVector) -> Result<LogitVector> {
    check_len(l_std.len(), l_conf.len())?;
    check_len(l_std.len(), gate.len())?;
    subtract_gated(l_std, l_conf, gate)
}

fn subtract_gated(l_std: &LogitVector, direction: &LogitVector, gate: &GateVector) -> Result<LogitVector> {
    LogitVector::new(
        l_std
            .as_slice()
            .iter()
            .zip(direction.as_slice())
            .zip(gate.as_slice())
            .map(|((s, d), a)| s - a * d)
            .collect(),
    )
}

/// Plain contrastive subtraction `l_std - lambda * l_conf`.
pub fn linear_subtract(l_std: &LogitVector, l_conf: &LogitVector, lambda: f64) -> Result<LogitVector> {
    check_len(l_std.len(), l_conf.len())?;
    LogitVector::new(
        l_std
            .as_slice()
            .iter()
            .zip(l_conf.as_slice())
            .map(|(s, c)| s - lambda * c)
            .collect(),
    )
}
