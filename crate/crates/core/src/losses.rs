//! The distillation objective family.
//!
//! Plain cross-entropy, temperature-scaled soft cross-entropy against a
//! fixed teacher, and three normalized-alignment losses: per-token
//! input-gradient alignment ([`gkd_loss`]), intermediate `[CLS]` state
//! alignment ([`pkd_loss`]), and intermediate `[CLS]` gradient alignment
//! ([`gkd_cls_loss`]). Two `combined_*` ops mix the pieces with
//! [`LossWeights`].
//!
//! Teacher-side inputs are plain [`Value`]s, so no gradient can reach the
//! teacher by construction; every student-side input is a graph [`Tensor`]
//! and the returned scalar is differentiable end to end. Sums over the
//! batch are scaled by `1/batch`, so loss magnitudes (and the weight grids
//! that go with them) do not depend on batch size.

use serde::{Deserialize, Serialize};

use crate::autodiff::value;
use crate::autodiff::{Graph, Tensor, Value, L2_EPS};
use crate::error::{Error, Result};

// ── Weights and layer maps ───────────────────────────────────────────────

/// Mixing weights for the combined objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Soft-target weight in `[0, 1]`; hard cross-entropy gets `1 - alpha`.
    pub alpha: f64,
    /// Softmax temperature for the soft targets; must be positive.
    pub tau: f64,
    /// Weight of the third term: token-gradient alignment in
    /// [`combined_gkd`], `[CLS]`-state alignment in [`combined_gkd_cls`].
    pub beta: f64,
    /// Weight of the gradient-alignment pair in [`combined_gkd_cls`].
    pub gamma: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Which student layers align with which teacher layers.
///
/// Layers are numbered from 1. The final student layer is deliberately never
/// mapped — its `[CLS]` state feeds the classifier head directly — so
/// student entries must stay strictly below the student depth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipMap {
    student_layers: Vec<usize>,
    teacher_layers: Vec<usize>,
}

impl SkipMap {
    /// Builds an explicit map, validating monotonicity and depth bounds.
    pub fn new(
        student_layers: Vec<usize>,
        teacher_layers: Vec<usize>,
        student_depth: usize,
        teacher_depth: usize,
    ) -> Result<SkipMap> {
        if student_layers.len() != teacher_layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer map lists differ in length: {} student vs {} teacher entries",
                student_layers.len(),
                teacher_layers.len()
            )));
        }
        for (name, list, max) in [
            ("student", &student_layers, student_depth.saturating_sub(1)),
            ("teacher", &teacher_layers, teacher_depth),
        ] {
            for (k, &layer) in list.iter().enumerate() {
                if layer == 0 || layer > max {
                    return Err(Error::InvalidArgument(format!(
                        "{name} layer {layer} out of range 1..={max} (layers are numbered from 1; \
                         the final student layer is excluded)"
                    )));
                }
                if k > 0 && list[k - 1] >= layer {
                    return Err(Error::InvalidArgument(format!(
                        "{name} layers must be strictly increasing, got {layer} after {}",
                        list[k - 1]
                    )));
                }
            }
        }
        Ok(SkipMap { student_layers, teacher_layers })
    }

    /// Evenly spaced map for a teacher exactly twice as deep as the student:
    /// student layer `j` aligns with teacher layer `2j`, for
    /// `j in 1..student_depth`. Other depth ratios are rejected.
    pub fn uniform(student_depth: usize, teacher_depth: usize) -> Result<SkipMap> {
        if teacher_depth != 2 * student_depth || student_depth == 0 {
            return Err(Error::InvalidArgument(format!(
                "the evenly spaced layer map needs a teacher exactly twice as deep as the \
                 student, got depths {student_depth} and {teacher_depth}"
            )));
        }
        let student: Vec<usize> = (1..student_depth).collect();
        let teacher: Vec<usize> = student.iter().map(|j| 2 * j).collect();
        SkipMap::new(student, teacher, student_depth, teacher_depth)
    }

    /// Number of mapped layer pairs.
    pub fn len(&self) -> usize {
        self.student_layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.student_layers.is_empty()
    }

    /// Mapped student layers, 1-based.
    pub fn student_layers(&self) -> &[usize] {
        &self.student_layers
    }

    /// Mapped teacher layers, 1-based.
    pub fn teacher_layers(&self) -> &[usize] {
        &self.teacher_layers
    }
}

// ── Hard and soft cross-entropy ──────────────────────────────────────────

/// Mean over the batch of `-log probs[i][labels[i]]`.
pub fn cross_entropy(g: &Graph, probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = probs.shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("expected nonempty [batch, n_classes] probabilities, got {shape:?}"),
        });
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{b} probability rows but {} labels", labels.len()),
        });
    }
    // One-hot picking keeps the gradient on the labelled entry only.
    let mut hot = Value::zeros(&[b, c]);
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes (example {i})"
            )));
        }
        hot.data_mut()[i * c + label] = 1.0;
    }
    let picked = g.sum_last_keepdim(&g.mul(probs, &g.constant(hot))?)?; // [b, 1]
    g.mul(&g.scalar(-1.0), &g.mean(&g.log(&picked)?)?)
}

/// Temperature-scaled soft cross-entropy: `tau^2` times the mean KL
/// divergence from the teacher's softened distribution to the student's.
///
/// Both sides compute `log softmax(logits / tau)` with the same operation
/// order, so bitwise-identical logits give exactly zero.
pub fn soft_ce(g: &Graph, teacher_logits: &Value, student_logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    let shape = student_logits.shape().to_vec();
    if teacher_logits.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "soft_ce",
            detail: format!(
                "teacher logits {:?} vs student logits {:?}",
                teacher_logits.shape(),
                shape
            ),
        });
    }
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "soft_ce",
            detail: format!("expected nonempty [batch, n_classes] logits, got {shape:?}"),
        });
    }
    let b = shape[0];
    let inv_tau = 1.0 / tau;
    let (t_prob, t_logp) = softened_log_softmax(teacher_logits, inv_tau);
    // Student log softmax(z/tau), max-shifted: (a - m) - log Σ exp(a - m).
    let a = g.mul(student_logits, &g.scalar(inv_tau))?;
    let m = g.reshape(&g.max_last(&a)?, &[b, 1])?;
    let shifted = g.sub(&a, &m)?;
    let lse = g.log(&g.sum_last_keepdim(&g.exp(&shifted)?)?)?; // [b, 1]
    let s_logq = g.sub(&shifted, &lse)?;
    // KL row = Σ_c p_T · (log p_T − log q_S); teacher terms are constants.
    let gap = g.sub(&g.constant(t_logp), &s_logq)?;
    let row = g.sum_last_keepdim(&g.mul(&g.constant(t_prob), &gap)?)?; // [b, 1]
    g.mul(&g.scalar(tau * tau), &g.mean(&row)?)
}

/// Softened probabilities and log-probabilities of constant logits, using
/// the same elementary steps (scale, max shift, exp, ordered sum, log) as
/// the graph-side student path so the two agree bitwise on equal inputs.
fn softened_log_softmax(logits: &Value, inv_tau: f64) -> (Value, Value) {
    let shape = logits.shape().to_vec();
    let c = *shape.last().expect("checked: rank 2");
    let rows = logits.numel() / c;
    let mut prob = vec![0.0; logits.numel()];
    let mut logp = vec![0.0; logits.numel()];
    for r in 0..rows {
        let zr = &logits.data()[r * c..(r + 1) * c];
        let a: Vec<f64> = zr.iter().map(|&z| z * inv_tau).collect();
        let mut m = a[0];
        for &v in &a[1..] {
            if v > m {
                m = v;
            }
        }
        let e: Vec<f64> = a.iter().map(|&v| (v - m).exp()).collect();
        let mut sum = 0.0;
        for &v in &e {
            sum += v;
        }
        let lse = sum.ln();
        for k in 0..c {
            prob[r * c + k] = e[k] / sum;
            logp[r * c + k] = (a[k] - m) - lse;
        }
    }
    (
        Value::new(shape.clone(), prob).expect("shape preserved"),
        Value::new(shape, logp).expect("shape preserved"),
    )
}

// ── Normalized-alignment losses ──────────────────────────────────────────

/// Unit-normalizes the last axis of a constant, with the same epsilon guard
/// the graph-side normalization uses.
fn normalize_rows(v: &Value) -> Result<Value> {
    let norms = value::l2norm_last(v, L2_EPS)?;
    value::broadcast_binary("div", v, &norms, |a, b| a / b)
}

/// Shared core of the three alignment losses: `Σ ‖u/‖u‖ − v̂‖²` over every
/// vector along the last axis, with an optional 0/1 mask per vector.
fn normalized_alignment_sum(
    g: &Graph,
    student: &Tensor,
    teacher_hat: Value,
    mask: Option<Value>,
) -> Result<Tensor> {
    let s_hat = g.div(student, &g.l2norm_last(student)?)?;
    let diff = g.sub(&s_hat, &g.constant(teacher_hat))?;
    let mut sq = g.square(&diff)?;
    if let Some(m) = mask {
        sq = g.mul(&sq, &g.constant(m))?;
    }
    g.sum(&sq)
}

/// Per-token input-gradient alignment.
///
/// Sums `‖g_S/‖g_S‖ − g_T/‖g_T‖‖²` over the real token positions of every
/// example (`j < lengths[i]`; padding excluded) and scales by `1/batch`.
/// Gradients are each model's own top-probability gradient with respect to
/// its input embeddings, shaped `[batch, seq, d_model]`.
pub fn gkd_loss(
    g: &Graph,
    student_grads: &Tensor,
    teacher_grads: &Value,
    lengths: &[usize],
) -> Result<Tensor> {
    let shape = student_grads.shape().to_vec();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "gkd_loss",
            detail: format!("expected nonempty [batch, seq, d_model] gradients, got {shape:?}"),
        });
    }
    if teacher_grads.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "gkd_loss",
            detail: format!(
                "teacher gradients {:?} vs student gradients {:?}",
                teacher_grads.shape(),
                shape
            ),
        });
    }
    let (b, s) = (shape[0], shape[1]);
    if lengths.len() != b {
        return Err(Error::ShapeMismatch {
            op: "gkd_loss",
            detail: format!("{b} gradient rows but {} lengths", lengths.len()),
        });
    }
    let mut mask = Value::zeros(&[b, s, 1]);
    for (i, &len) in lengths.iter().enumerate() {
        if len > s {
            return Err(Error::InvalidArgument(format!(
                "length {len} exceeds padded width {s} (example {i})"
            )));
        }
        for j in 0..len {
            mask.data_mut()[i * s + j] = 1.0;
        }
    }
    let total = normalized_alignment_sum(g, student_grads, normalize_rows(teacher_grads)?, Some(mask))?;
    g.mul(&g.scalar(1.0 / b as f64), &total)
}

/// Intermediate `[CLS]`-state alignment across the mapped layer pairs:
/// `Σ ‖h_S/‖h_S‖ − h_T/‖h_T‖‖²` over batch rows and pairs, scaled by
/// `1/batch`. `student_cls[k]` and `teacher_cls[k]` hold the states at the
/// k-th mapped student and teacher layer, each `[batch, d_model]`.
pub fn pkd_loss(
    g: &Graph,
    student_cls: &[Tensor],
    teacher_cls: &[Value],
    map: &SkipMap,
) -> Result<Tensor> {
    aligned_pairs("pkd_loss", g, student_cls, teacher_cls, map)
}

/// Same alignment form as [`pkd_loss`], applied to the gradients of each
/// model's top probability with respect to the mapped `[CLS]` states.
pub fn gkd_cls_loss(
    g: &Graph,
    student_cls_grads: &[Tensor],
    teacher_cls_grads: &[Value],
    map: &SkipMap,
) -> Result<Tensor> {
    aligned_pairs("gkd_cls_loss", g, student_cls_grads, teacher_cls_grads, map)
}

fn aligned_pairs(
    op: &'static str,
    g: &Graph,
    student: &[Tensor],
    teacher: &[Value],
    map: &SkipMap,
) -> Result<Tensor> {
    if student.len() != map.len() || teacher.len() != map.len() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!(
                "{} student and {} teacher entries for {} mapped layers",
                student.len(),
                teacher.len(),
                map.len()
            ),
        });
    }
    let mut total = g.scalar(0.0);
    let mut batch = None;
    for (k, (s, t)) in student.iter().zip(teacher).enumerate() {
        let shape = s.shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 || t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!(
                    "pair {k}: student {:?} vs teacher {:?}, expected matching nonempty \
                     [batch, d_model]",
                    shape,
                    t.shape()
                ),
            });
        }
        if *batch.get_or_insert(shape[0]) != shape[0] {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("pair {k} changes the batch size to {}", shape[0]),
            });
        }
        total = g.add(&total, &normalized_alignment_sum(g, s, normalize_rows(t)?, None)?)?;
    }
    match batch {
        Some(b) => g.mul(&g.scalar(1.0 / b as f64), &total),
        None => Ok(total), // empty map: nothing to align
    }
}

// ── Combined objectives ──────────────────────────────────────────────────

/// `(1 − alpha)·ce + alpha·soft + beta·gkd`.
pub fn combined_gkd(
    g: &Graph,
    ce: &Tensor,
    soft: &Tensor,
    gkd: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    w.validate()?;
    expect_scalar("combined_gkd", &[("ce", ce), ("soft", soft), ("gkd", gkd)])?;
    let hard = g.mul(&g.scalar(1.0 - w.alpha), ce)?;
    let soft = g.mul(&g.scalar(w.alpha), soft)?;
    let grad = g.mul(&g.scalar(w.beta), gkd)?;
    g.add(&g.add(&hard, &soft)?, &grad)
}

/// `(1 − alpha)·ce + alpha·soft + beta·pkd + gamma·(gkd + gkd_cls)`.
pub fn combined_gkd_cls(
    g: &Graph,
    ce: &Tensor,
    soft: &Tensor,
    pkd: &Tensor,
    gkd: &Tensor,
    gkd_cls: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    w.validate()?;
    expect_scalar(
        "combined_gkd_cls",
        &[("ce", ce), ("soft", soft), ("pkd", pkd), ("gkd", gkd), ("gkd_cls", gkd_cls)],
    )?;
    let hard = g.mul(&g.scalar(1.0 - w.alpha), ce)?;
    let soft = g.mul(&g.scalar(w.alpha), soft)?;
    let states = g.mul(&g.scalar(w.beta), pkd)?;
    let grads = g.mul(&g.scalar(w.gamma), &g.add(gkd, gkd_cls)?)?;
    g.add(&g.add(&g.add(&hard, &soft)?, &states)?, &grads)
}

fn expect_scalar(op: &'static str, parts: &[(&str, &Tensor)]) -> Result<()> {
    for (name, t) in parts {
        if t.value().numel() != 1 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("component {name} must be a scalar, got shape {:?}", t.shape()),
            });
        }
    }
    Ok(())
}

// ── Tests ────────────────────────────────────────────────────────────────
