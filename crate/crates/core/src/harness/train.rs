//! Teacher training, distillation with each method, and loyalty evaluation.
//!
//! Both training loops share their seed-derivation streams, batching, and
//! update plumbing, so `finetune` distillation of some architecture is
//! bit-identical to training that architecture alone with the same seed.
//! Teacher-side distillation targets are recomputed per batch with dropout
//! off: that keeps them on exactly the same padded layout the student
//! sees, which is what makes the self-distillation identities exact.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Graph, Tensor, Value};
use crate::data::{Example, SyntheticData, Vocab};
use crate::dropout_bias::{EXAMPLE_STRIDE, SEED_STRIDE};
use crate::error::{Error, Result};
use crate::losses::{self, SkipMap};
use crate::metrics::{self, LoyaltyReport};
use crate::model::{
    init_student_from_teacher, Batch, BoundModel, DropoutState, Model, ModelConfig, ModelOutputs,
};

use super::optim::{Adam, AdamParams};
use super::{EpochMetrics, ExperimentConfig, Method, RunResult, RunRole, Step0Breakdown};

/// Seed streams: epoch shuffles and dropout masks must never share a
/// sequence, or reordering batches would silently reuse masks.
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn derived_seed(base: u64, stream: u64, index: u64) -> u64 {
    base.wrapping_add(stream.wrapping_mul(SEED_STRIDE))
        .wrapping_add(index.wrapping_mul(EXAMPLE_STRIDE))
}

// ── Batching and evaluation ──────────────────────────────────────────────

fn natural_order(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order = natural_order(n);
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    order
}

/// Materializes padded batches over `examples[order]`, chunked in order.
fn batches_in(examples: &[Example], order: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows: Vec<Vec<usize>> = chunk.iter().map(|&i| examples[i].tokens.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| examples[i].label).collect();
            Batch::new(&rows, &labels, None)
        })
        .collect()
}

fn count_agreements(out: &ModelOutputs, labels: &[usize]) -> usize {
    out.predictions().iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Plain cross-entropy loss and accuracy (percent) with dropout off. Used
/// for validation and test regardless of the training objective, so
/// methods stay comparable.
fn evaluate(model: &Model, examples: &[Example], batch_size: usize) -> Result<(f64, f64)> {
    let c = model.config().n_classes;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for batch in batches_in(examples, &natural_order(examples.len()), batch_size)? {
        let out = model.forward_eval(&batch)?;
        for (i, (&label, pred)) in batch.labels.iter().zip(out.predictions()).enumerate() {
            loss_sum += -out.probs.data()[i * c + label].ln();
            correct += (pred == label) as usize;
        }
    }
    let n = examples.len() as f64;
    Ok((loss_sum / n, 100.0 * correct as f64 / n))
}

/// Sanity checks that a model can actually consume this dataset.
fn check_compat(data: &SyntheticData, config: &ModelConfig, who: &str) -> Result<()> {
    if data.vocab.size() != config.vocab_size {
        return Err(Error::Config(format!(
            "{who} vocabulary size {} disagrees with the dataset's {}",
            config.vocab_size,
            data.vocab.size()
        )));
    }
    if data.n_classes != config.n_classes {
        return Err(Error::Config(format!(
            "{who} expects {} classes, dataset has {}",
            config.n_classes, data.n_classes
        )));
    }
    for (split, examples) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let longest = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        if longest + 1 > config.max_len {
            return Err(Error::Config(format!(
                "{split} split has a {longest}-token sentence; {who} fits at most {} \
                 (one position is reserved for [CLS])",
                config.max_len - 1
            )));
        }
    }
    Ok(())
}

fn dropout_state(active: bool, rate: f64, seed: u64, epoch: usize, step: usize) -> Result<DropoutState> {
    if active {
        let index = ((epoch as u64) << 32) | step as u64;
        DropoutState::active(rate, derived_seed(seed, DROPOUT_STREAM, index))
    } else {
        Ok(DropoutState::inactive())
    }
}

/// Backward over the assembled loss, then one Adam update on the trainable
/// parameter slots (frozen embeddings are skipped).
fn apply_update(
    adam: &mut Adam,
    model: &mut Model,
    g: &Graph,
    bound: &BoundModel,
    loss: &Tensor,
) -> Result<()> {
    let grad_map = g.backward(loss, false)?;
    let mask = model.trainable_mask();
    let mut grads: Vec<Option<Value>> = Vec::with_capacity(mask.len());
    for ((_, tensor), trainable) in bound.params().iter().zip(&mask) {
        grads.push(if *trainable { Some(grad_map.value_wrt(tensor)?) } else { None });
    }
    adam.step(model, &grads)
}

// ── Teacher training ─────────────────────────────────────────────────────

/// Trains the teacher architecture from random init with plain
/// cross-entropy (dropout active per config). Non-finite losses abort with
/// a diagnostic instead of silently logging garbage.
pub fn train_teacher(config: &ExperimentConfig) -> Result<(Model, RunResult)> {
    config.validate()?;
    let data = config.task.load()?;
    check_compat(&data, &config.teacher, "teacher")?;
    let start = Instant::now();

    let mut model = Model::random(config.teacher.clone(), config.seed)?;
    let mut adam = Adam::new(AdamParams::with_lr(config.optimizer.learning_rate), &model);
    let dropout_on = config.teacher_dropout && config.teacher.dropout_rate > 0.0;
    let mut epochs = Vec::new();
    let mut draws = 0u64;

    for epoch in 0..config.optimizer.epochs {
        let order =
            shuffled_order(data.train.len(), derived_seed(config.seed, SHUFFLE_STREAM, epoch as u64));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, batch) in
            batches_in(&data.train, &order, config.optimizer.batch_size)?.iter().enumerate()
        {
            let g = Graph::new();
            let bound = model.bind(&g);
            let mut dropout =
                dropout_state(dropout_on, config.teacher.dropout_rate, config.seed, epoch, step)?;
            let out = bound.forward(batch, &mut dropout)?;
            draws += dropout.draws();
            let loss = losses::cross_entropy(&g, &out.probs, &batch.labels)?;
            let loss_val = loss.item()?;
            if !loss_val.is_finite() {
                return Err(Error::Diverged(format!(
                    "teacher loss became {loss_val} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss_val * batch.batch as f64;
            correct += count_agreements(&out, &batch.labels);
            apply_update(&mut adam, &mut model, &g, &bound, &loss)?;
        }
        let (val_loss, val_accuracy) = evaluate(&model, &data.val, config.optimizer.batch_size)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            train_accuracy: 100.0 * correct as f64 / data.train.len() as f64,
            val_loss,
            val_accuracy,
        });
    }

    let (_, test_accuracy) = evaluate(&model, &data.test, config.optimizer.batch_size)?;
    let result = RunResult {
        role: RunRole::Teacher,
        method: Method::Finetune,
        seed: config.seed,
        config_hash: config.config_hash(),
        epochs,
        test_accuracy,
        loyalty: None,
        step0: None,
        dropout_draws: draws,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, result))
}

// ── Distillation ─────────────────────────────────────────────────────────

/// Student→teacher `[CLS]` alignment map: evenly spaced 2:1 when the
/// teacher is exactly twice as deep, the identity when depths match
/// (self-distillation); other ratios have no canonical map and are
/// rejected.
fn layer_map(student_depth: usize, teacher_depth: usize) -> Result<SkipMap> {
    if teacher_depth == 2 * student_depth {
        SkipMap::uniform(student_depth, teacher_depth)
    } else if teacher_depth == student_depth {
        let layers: Vec<usize> = (1..student_depth).collect();
        SkipMap::new(layers.clone(), layers, student_depth, teacher_depth)
    } else {
        Err(Error::Config(format!(
            "no canonical layer map for student depth {student_depth} vs teacher depth \
             {teacher_depth}; supported ratios: equal, or teacher exactly twice as deep"
        )))
    }
}

/// Per-batch teacher quantities, computed with dropout off on the same
/// padded layout the student trains on. Only what the method consumes is
/// computed.
struct TeacherTargets {
    logits: Value,
    cls_states: Vec<Value>,
    embedding_grads: Option<Value>,
    cls_grads: Vec<Value>,
}

fn teacher_targets(
    teacher: &Model,
    batch: &Batch,
    method: Method,
    map: Option<&SkipMap>,
) -> Result<TeacherTargets> {
    let g = Graph::new();
    let bound = teacher.bind(&g);
    let out = bound.forward(batch, &mut DropoutState::inactive())?;
    let mapped: Vec<usize> = map.map(|m| m.teacher_layers().to_vec()).unwrap_or_default();
    let cls_states: Vec<Value> = if method.maps_cls_states() {
        mapped.iter().map(|&l| out.cls_hidden[l - 1].to_value()).collect()
    } else {
        Vec::new()
    };

    let mut embedding_grads = None;
    let mut cls_grads = Vec::new();
    if method.aligns_gradients() {
        let pm_sum = g.sum(&out.max_prob)?;
        let mut wrt: Vec<&Tensor> = vec![&out.input_embeddings];
        if method == Method::GkdCls {
            wrt.extend(mapped.iter().map(|&l| &out.cls_hidden[l - 1]));
        }
        let grads = g.backward_wrt(&pm_sum, &wrt, false)?;
        embedding_grads = Some(grads.value_wrt(&out.input_embeddings)?);
        if method == Method::GkdCls {
            cls_grads = mapped
                .iter()
                .map(|&l| grads.value_wrt(&out.cls_hidden[l - 1]))
                .collect::<Result<_>>()?;
        }
    }
    Ok(TeacherTargets { logits: out.logits.to_value(), cls_states, embedding_grads, cls_grads })
}

/// Assembles the method's training loss on the student graph and reports
/// the component values. The hard/soft blend is built with the same op
/// sequence everywhere, so `gkd` with `beta = 0` adds an exact zero to the
/// `vanilla_kd` loss and reproduces its trajectory bit for bit.
fn method_loss(
    g: &Graph,
    config: &ExperimentConfig,
    teacher: &Model,
    batch: &Batch,
    out: &ModelOutputs,
    map: Option<&SkipMap>,
) -> Result<(Tensor, Step0Breakdown)> {
    let w = &config.weights;
    let ce = losses::cross_entropy(g, &out.probs, &batch.labels)?;
    let mut parts =
        Step0Breakdown { ce: ce.item()?, soft: 0.0, pkd: 0.0, gkd: 0.0, gkd_cls: 0.0, total: 0.0 };
    if config.method == Method::Finetune {
        parts.total = parts.ce;
        return Ok((ce, parts));
    }

    let targets = teacher_targets(teacher, batch, config.method, map)?;
    let soft = losses::soft_ce(g, &targets.logits, &out.logits, w.tau)?;
    parts.soft = soft.item()?;
    // The same op sequence `combined_gkd` uses for its first two terms.
    let blend = || -> Result<Tensor> {
        let hard_term = g.mul(&g.scalar(1.0 - w.alpha), &ce)?;
        let soft_term = g.mul(&g.scalar(w.alpha), &soft)?;
        g.add(&hard_term, &soft_term)
    };
    let student_states = |m: &SkipMap| -> Vec<Tensor> {
        m.student_layers().iter().map(|&l| out.cls_hidden[l - 1].clone()).collect()
    };

    let total = match config.method {
        Method::VanillaKd => blend()?,
        Method::BertPkd => {
            let m = map.expect("bert_pkd validated to carry a layer map");
            let pkd = losses::pkd_loss(g, &student_states(m), &targets.cls_states, m)?;
            parts.pkd = pkd.item()?;
            g.add(&blend()?, &g.mul(&g.scalar(w.beta), &pkd)?)?
        }
        Method::Gkd => {
            let pm_sum = g.sum(&out.max_prob)?;
            let inner = g.backward_wrt(&pm_sum, &[&out.input_embeddings], true)?;
            let e_grad = inner.wrt(&out.input_embeddings)?;
            let t_grads = targets.embedding_grads.as_ref().expect("gkd computes teacher grads");
            let gkd = losses::gkd_loss(g, &e_grad, t_grads, &batch.lengths)?;
            parts.gkd = gkd.item()?;
            losses::combined_gkd(g, &ce, &soft, &gkd, w)?
        }
        Method::GkdCls => {
            let m = map.expect("gkd_cls validated to carry a layer map");
            let s_states = student_states(m);
            let pkd = losses::pkd_loss(g, &s_states, &targets.cls_states, m)?;
            let pm_sum = g.sum(&out.max_prob)?;
            let mut wrt: Vec<&Tensor> = vec![&out.input_embeddings];
            wrt.extend(s_states.iter());
            let inner = g.backward_wrt(&pm_sum, &wrt, true)?;
            let e_grad = inner.wrt(&out.input_embeddings)?;
            let t_grads = targets.embedding_grads.as_ref().expect("gkd_cls computes teacher grads");
            let gkd = losses::gkd_loss(g, &e_grad, t_grads, &batch.lengths)?;
            let s_cls_grads: Vec<Tensor> =
                s_states.iter().map(|t| inner.wrt(t)).collect::<Result<_>>()?;
            let gkd_cls = losses::gkd_cls_loss(g, &s_cls_grads, &targets.cls_grads, m)?;
            parts.pkd = pkd.item()?;
            parts.gkd = gkd.item()?;
            parts.gkd_cls = gkd_cls.item()?;
            losses::combined_gkd_cls(g, &ce, &soft, &pkd, &gkd, &gkd_cls, w)?
        }
        Method::Finetune => unreachable!("handled above"),
    };
    parts.total = total.item()?;
    Ok((total, parts))
}

/// Distills `teacher` into a fresh student with the configured method.
///
/// Teacher-using methods initialize the student from the teacher
/// (embeddings, first blocks, head) and keep the embedding tables frozen:
/// gradient-aligning methods need the shared input coordinate system, and
/// applying the same policy to every distillation method removes an
/// optimization confound between them — it is also what makes `gkd` with
/// `beta = 0` reduce to `vanilla_kd` exactly. `finetune` ignores the
/// teacher entirely and trains from random init.
pub fn distill(config: &ExperimentConfig, teacher: &Model) -> Result<(Model, RunResult)> {
    config.validate()?;
    if teacher.config() != &config.teacher {
        return Err(Error::Config(
            "teacher checkpoint architecture disagrees with the config's teacher section".into(),
        ));
    }
    let data = config.task.load()?;
    check_compat(&data, &config.teacher, "teacher")?;
    check_compat(&data, &config.student, "student")?;
    let method = config.method;
    let map = if method.maps_cls_states() {
        Some(layer_map(config.student.n_layers, config.teacher.n_layers)?)
    } else {
        None
    };

    let start = Instant::now();
    let mut student = if method.uses_teacher() {
        let mut s = init_student_from_teacher(&config.student, teacher)?;
        s.set_embeddings_frozen(true);
        s
    } else {
        Model::random(config.student.clone(), config.seed)?
    };

    let mut adam = Adam::new(AdamParams::with_lr(config.optimizer.learning_rate), &student);
    let dropout_on = config.student_dropout_active() && config.student.dropout_rate > 0.0;
    let mut epochs = Vec::new();
    let mut draws = 0u64;
    let mut step0 = None;

    for epoch in 0..config.optimizer.epochs {
        let order =
            shuffled_order(data.train.len(), derived_seed(config.seed, SHUFFLE_STREAM, epoch as u64));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (step, batch) in
            batches_in(&data.train, &order, config.optimizer.batch_size)?.iter().enumerate()
        {
            let g = Graph::new();
            let bound = student.bind(&g);
            let mut dropout =
                dropout_state(dropout_on, config.student.dropout_rate, config.seed, epoch, step)?;
            let out = bound.forward(batch, &mut dropout)?;
            draws += dropout.draws();
            let (total, breakdown) = method_loss(&g, config, teacher, batch, &out, map.as_ref())?;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "{method} loss became {} at epoch {epoch}, step {step}",
                    breakdown.total
                )));
            }
            if step0.is_none() {
                step0 = Some(breakdown);
            }
            loss_sum += breakdown.total * batch.batch as f64;
            correct += count_agreements(&out, &batch.labels);
            apply_update(&mut adam, &mut student, &g, &bound, &total)?;
        }
        let (val_loss, val_accuracy) = evaluate(&student, &data.val, config.optimizer.batch_size)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            train_accuracy: 100.0 * correct as f64 / data.train.len() as f64,
            val_loss,
            val_accuracy,
        });
    }

    let (_, test_accuracy) = evaluate(&student, &data.test, config.optimizer.batch_size)?;
    let loyalty =
        eval_loyalty(teacher, &student, &data.test, &data.vocab, config.optimizer.batch_size)?;
    if method.aligns_gradients() && !config.dropout_ablation {
        assert_eq!(draws, 0, "dropout-deactivation policy sampled a mask");
    }
    let result = RunResult {
        role: RunRole::Student,
        method,
        seed: config.seed,
        config_hash: config.config_hash(),
        epochs,
        test_accuracy,
        loyalty: Some(loyalty),
        step0,
        dropout_draws: draws,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((student, result))
}

// ── Loyalty evaluation ───────────────────────────────────────────────────

/// Scores student-vs-teacher behavior consistency on `examples`: label
/// agreement, probability agreement, and saliency correlation, all with
/// dropout off.
pub fn eval_loyalty(
    teacher: &Model,
    student: &Model,
    examples: &[Example],
    vocab: &Vocab,
    batch_size: usize,
) -> Result<LoyaltyReport> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("loyalty evaluation needs at least one example".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    for (who, model) in [("teacher", teacher), ("student", student)] {
        if model.config().vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "{who} vocabulary size {} disagrees with the dataset's {}",
                model.config().vocab_size,
                vocab.size()
            )));
        }
    }
    if teacher.config().n_classes != student.config().n_classes {
        return Err(Error::Config(format!(
            "class counts disagree: teacher {}, student {}",
            teacher.config().n_classes,
            student.config().n_classes
        )));
    }

    let c = teacher.config().n_classes;
    let n = examples.len();
    let mut teacher_rows = Vec::with_capacity(n);
    let mut student_rows = Vec::with_capacity(n);
    let mut teacher_maps = Vec::with_capacity(n);
    let mut student_maps = Vec::with_capacity(n);
    for batch in batches_in(examples, &natural_order(n), batch_size)? {
        for (who, model, rows, maps) in [
            ("teacher", teacher, &mut teacher_rows, &mut teacher_maps),
            ("student", student, &mut student_rows, &mut student_maps),
        ] {
            let out = model.forward_eval(&batch).map_err(|e| {
                Error::Config(format!("{who} cannot evaluate this dataset: {e}"))
            })?;
            rows.extend(out.probs.data().chunks(c).map(|row| row.to_vec()));
            maps.extend(metrics::grad_saliency(model, &batch, vocab)?);
        }
    }

    let teacher_preds: Vec<usize> = teacher_maps.iter().map(|m| m.predicted_class).collect();
    let student_preds: Vec<usize> = student_maps.iter().map(|m| m.predicted_class).collect();
    let label_loyalty = metrics::label_loyalty(&teacher_preds, &student_preds)?;
    let probability_loyalty = metrics::probability_loyalty(&teacher_rows, &student_rows)?;
    let (saliency_loyalty, sl_excluded) = metrics::saliency_loyalty(&teacher_maps, &student_maps)?;
    Ok(LoyaltyReport {
        label_loyalty,
        probability_loyalty,
        saliency_loyalty,
        n_examples: n,
        sl_excluded,
    })
}
