//! Behavior-consistency metrics between a teacher and a student.
//!
//! Three loyalties: label loyalty (prediction agreement rate), probability
//! loyalty (distribution agreement via the Jensen–Shannon distance), and
//! saliency loyalty (mean Pearson correlation between per-token gradient
//! saliency distributions). Saliency itself is the L2 norm of the gradient
//! of the model's own top class probability with respect to each token's
//! input embedding, normalized per sentence — the concrete norm and
//! aggregation choices are stated here because reports expose them.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Batch, DropoutState, Model};

// ── Types ────────────────────────────────────────────────────────────────

/// Per-token saliency distribution for one sentence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Nonnegative per-token scores over the real tokens, summing to 1.
    pub scores: Vec<f64>,
    /// `sign(⟨∂p_max/∂E_j, E_j⟩)` per token (+1, −1, or 0), display only.
    pub signs: Vec<f64>,
    /// Token strings for display, aligned with `scores`.
    pub tokens: Vec<String>,
    pub predicted_class: usize,
    pub max_prob: f64,
    /// True when the gradient vanished everywhere and the map fell back to
    /// the uniform distribution.
    pub degenerate: bool,
}

/// Teacher/student agreement summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoyaltyReport {
    /// 100 × fraction of matching predictions.
    pub label_loyalty: f64,
    /// 100 × mean (1 − Jensen–Shannon distance), base-2 logarithms.
    pub probability_loyalty: f64,
    /// 100 × mean Pearson correlation between saliency distributions.
    pub saliency_loyalty: f64,
    pub n_examples: usize,
    /// Sentences excluded from saliency loyalty for zero variance.
    pub sl_excluded: usize,
}

// ── Label loyalty ────────────────────────────────────────────────────────

/// 100 × fraction of indices where the two prediction lists agree.
pub fn label_loyalty(teacher_preds: &[usize], student_preds: &[usize]) -> Result<f64> {
    if teacher_preds.len() != student_preds.len() || teacher_preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "prediction lists must be nonempty and equal length, got {} and {}",
            teacher_preds.len(),
            student_preds.len()
        )));
    }
    let agree = teacher_preds
        .iter()
        .zip(student_preds)
        .filter(|(t, s)| t == s)
        .count();
    Ok(100.0 * agree as f64 / teacher_preds.len() as f64)
}

// ── Probability loyalty ──────────────────────────────────────────────────

/// Base-2 Jensen–Shannon divergence between two probability rows; lies in
/// [0, 1]. Zero-probability entries contribute nothing (0·log 0 = 0).
fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut half_sum = 0.0;
    for side in [(p, q), (q, p)] {
        let (a, b) = side;
        let mut kl = 0.0;
        for (ai, bi) in a.iter().zip(b) {
            if *ai > 0.0 {
                let m = 0.5 * (ai + bi);
                kl += ai * (ai / m).log2();
            }
        }
        half_sum += 0.5 * kl;
    }
    half_sum
}

/// 100 × mean over rows of `1 − sqrt(JS(pᵀ_i, pˢ_i))`.
///
/// The Jensen–Shannon *distance* (square root of the base-2 divergence) is
/// bounded in [0, 1], symmetric, and zero exactly for identical rows, so a
/// model scored against itself gets exactly 100.
pub fn probability_loyalty(teacher_probs: &[Vec<f64>], student_probs: &[Vec<f64>]) -> Result<f64> {
    if teacher_probs.len() != student_probs.len() || teacher_probs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "probability lists must be nonempty and equal length, got {} and {}",
            teacher_probs.len(),
            student_probs.len()
        )));
    }
    for (i, (t, s)) in teacher_probs.iter().zip(student_probs).enumerate() {
        if t.len() != s.len() || t.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "probability_loyalty",
                detail: format!("row {i}: {} vs {} classes", t.len(), s.len()),
            });
        }
        for (name, row) in [("teacher", t), ("student", s)] {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Domain {
                    op: "probability_loyalty",
                    detail: format!("{name} row {i} is not a probability vector (sum {sum})"),
                });
            }
        }
    }
    let n = teacher_probs.len() as f64;
    let total: f64 = teacher_probs
        .iter()
        .zip(student_probs)
        .map(|(t, s)| 1.0 - js_divergence(t, s).sqrt())
        .sum();
    Ok(100.0 * total / n)
}

// ── Grad saliency ────────────────────────────────────────────────────────

/// Normalizes raw per-token magnitudes into a distribution; an all-zero
/// input falls back to the uniform map and is flagged degenerate.
pub fn normalized_scores(raw: &[f64]) -> (Vec<f64>, bool) {
    assert!(!raw.is_empty(), "no tokens to normalize");
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return (vec![1.0 / raw.len() as f64; raw.len()], true);
    }
    (raw.iter().map(|v| v / total).collect(), false)
}

/// Per-sentence gradient saliency with dropout off.
///
/// For each real token `j`, the score is `‖∂p_max/∂E_j‖₂` normalized to sum
/// to one over the sentence; the sign of `⟨∂p_max/∂E_j, E_j⟩` is kept for
/// display. Empty sentences cannot occur: [`Batch::new`] rejects them.
pub fn grad_saliency(model: &Model, batch: &Batch, vocab: &Vocab) -> Result<Vec<SaliencyMap>> {
    let g = Graph::new();
    let bound = model.bind(&g);
    let out = bound.forward(batch, &mut DropoutState::inactive())?;
    let pm_sum = g.sum(&out.max_prob)?;
    let grads = g.backward_wrt(&pm_sum, &[&out.input_embeddings], false)?;
    let e_grad = grads.value_wrt(&out.input_embeddings)?;
    let embeddings = out.input_embeddings.value();
    let d = model.config().d_model;
    let preds = out.predictions();

    let mut maps = Vec::with_capacity(batch.batch);
    for i in 0..batch.batch {
        let len = batch.lengths[i];
        let mut raw = Vec::with_capacity(len);
        let mut signs = Vec::with_capacity(len);
        for j in 0..len {
            let off = (i * batch.seq + j) * d;
            let gv = &e_grad.data()[off..off + d];
            let ev = &embeddings.data()[off..off + d];
            raw.push(gv.iter().map(|x| x * x).sum::<f64>().sqrt());
            let dot: f64 = gv.iter().zip(ev).map(|(a, b)| a * b).sum();
            signs.push(if dot > 0.0 {
                1.0
            } else if dot < 0.0 {
                -1.0
            } else {
                0.0
            });
        }
        let (scores, degenerate) = normalized_scores(&raw);
        let tokens = batch.tokens[i * batch.seq..i * batch.seq + len]
            .iter()
            .map(|&id| vocab.token(id))
            .collect::<Result<Vec<_>>>()?;
        maps.push(SaliencyMap {
            scores,
            signs,
            tokens,
            predicted_class: preds[i],
            max_prob: out.max_prob.data()[i],
            degenerate,
        });
    }
    Ok(maps)
}

// ── Saliency loyalty ─────────────────────────────────────────────────────

/// Pearson correlation; `None` when either input is constant (zero
/// variance) or shorter than two entries. Bitwise-equal non-constant
/// inputs return exactly 1.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "correlating different lengths");
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    if x == y {
        return Some(1.0);
    }
    // A single square root of the product keeps exactly (anti)correlated
    // inputs at ±1 instead of one ulp inside.
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 100 × mean Pearson correlation between aligned saliency distributions.
///
/// Sentences where either score vector is constant carry no correlation
/// signal; they are excluded from the mean and counted in the second
/// return value. If every sentence is excluded the percentage is 0.
pub fn saliency_loyalty(
    teacher_maps: &[SaliencyMap],
    student_maps: &[SaliencyMap],
) -> Result<(f64, usize)> {
    if teacher_maps.len() != student_maps.len() || teacher_maps.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "saliency lists must be nonempty and equal length, got {} and {}",
            teacher_maps.len(),
            student_maps.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (i, (t, s)) in teacher_maps.iter().zip(student_maps).enumerate() {
        if t.tokens != s.tokens {
            return Err(Error::InvalidArgument(format!(
                "sentence {i}: saliency maps disagree on tokenization"
            )));
        }
        match pearson(&t.scores, &s.scores) {
            Some(r) => {
                total += r;
                used += 1;
            }
            None => excluded += 1,
        }
    }
    let pct = if used == 0 { 0.0 } else { 100.0 * total / used as f64 };
    Ok((pct, excluded))
}

// ── Tests ────────────────────────────────────────────────────────────────
