//! A small transformer encoder classifier over token ids.
//!
//! Layout per forward pass: token + position embeddings for the sentence
//! positions (exposed as `input_embeddings`, the gradient-alignment
//! target), a learned `[CLS]` slot prepended at position 0, an embedding
//! layer norm, then post-norm transformer blocks. Every block's `[CLS]`
//! state is captured, the last one feeds a linear classifier head.

mod checkpoint;
mod dropout;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dropout::{apply_dropout, DropoutSpec, DropoutState};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{value, Graph, Tensor, Value};
use crate::data::CLS_ID;
use crate::error::{Error, Result};


/// Additive attention-mask value for padding keys: large enough that the
/// max-subtracted exponent underflows to exactly zero probability.
const MASK_NEG: f64 = -1e30;

/// Layer-norm variance epsilon.
const LN_EPS: f64 = 1e-5;

/// Standard deviation of random weight/embedding init.
const INIT_STD: f64 = 0.02;

// ── Config ───────────────────────────────────────────────────────────────

/// Architecture hyperparameters. `max_len` counts positions including the
/// prepended `[CLS]`, so sentences may have at most `max_len - 1` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 3 {
            return fail(format!("vocab_size {} cannot hold reserved ids plus a word", self.vocab_size));
        }
        if self.max_len < 2 {
            return fail("max_len must cover [CLS] plus at least one token".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail("all dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

// ── Batches ──────────────────────────────────────────────────────────────

/// A padded batch of tokenized sentences. `tokens` is row-major
/// `[batch, seq]` with `PAD_ID` beyond each row's true length.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Pads token rows to a common length (`pad_to`, or the longest row).
    pub fn new(rows: &[Vec<usize>], labels: &[usize], pad_to: Option<usize>) -> Result<Batch> {
        if rows.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} token rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let longest = rows.iter().map(Vec::len).max().unwrap();
        if longest == 0 || rows.iter().any(Vec::is_empty) {
            return Err(Error::Data("zero-length sentence in batch".into()));
        }
        let seq = pad_to.unwrap_or(longest);
        if seq < longest {
            return Err(Error::Data(format!(
                "pad_to {seq} shorter than longest sentence {longest}"
            )));
        }
        let mut tokens = vec![crate::data::PAD_ID; rows.len() * seq];
        for (i, row) in rows.iter().enumerate() {
            tokens[i * seq..i * seq + row.len()].copy_from_slice(row);
        }
        Ok(Batch {
            tokens,
            batch: rows.len(),
            seq,
            lengths: rows.iter().map(Vec::len).collect(),
            labels: labels.to_vec(),
        })
    }

    fn validate_against(&self, cfg: &ModelConfig) -> Result<()> {
        if self.seq + 1 > cfg.max_len {
            return Err(Error::Data(format!(
                "batch of {} token positions plus [CLS] exceeds max_len {}",
                self.seq, cfg.max_len
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} outside model vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= cfg.n_classes) {
            return Err(Error::Data(format!(
                "label {bad} outside {} classes",
                cfg.n_classes
            )));
        }
        Ok(())
    }
}

// ── Parameters ───────────────────────────────────────────────────────────

#[derive(Clone)]
struct LnParams {
    gamma: Value,
    beta: Value,
}

#[derive(Clone)]
struct LayerParams {
    wq: Value,
    bq: Value,
    wk: Value,
    bk: Value,
    wv: Value,
    bv: Value,
    wo: Value,
    bo: Value,
    ln1: LnParams,
    w1: Value,
    b1: Value,
    w2: Value,
    b2: Value,
    ln2: LnParams,
}

#[derive(Clone)]
struct Params {
    tok_emb: Value,
    pos_emb: Value,
    emb_ln: LnParams,
    layers: Vec<LayerParams>,
    cls_w: Value,
    cls_b: Value,
}

/// The classifier: config, parameter values, and an embedding-freeze flag.
/// Forward passes go through [`Model::bind`], which plants the parameters
/// as leaves on a caller-owned graph.
#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    frozen_embeddings: bool,
}

impl Model {
    /// Seeded random initialization: weights and embeddings are
    /// normal(0, 0.02), biases zero, layer-norm gains one. The draw order
    /// is fixed, so a seed pins every parameter.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut randn = |shape: &[usize]| -> Value {
            let data = (0..value::numel(shape)).map(|_| dist.sample(&mut rng)).collect();
            Value::new(shape.to_vec(), data).expect("shape/data agree")
        };
        let d = config.d_model;
        let ln = |_: &str| LnParams { gamma: Value::ones(&[d]), beta: Value::zeros(&[d]) };
        let tok_emb = randn(&[config.vocab_size, d]);
        let pos_emb = randn(&[config.max_len, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: randn(&[d, d]),
                bq: Value::zeros(&[d]),
                wk: randn(&[d, d]),
                bk: Value::zeros(&[d]),
                wv: randn(&[d, d]),
                bv: Value::zeros(&[d]),
                wo: randn(&[d, d]),
                bo: Value::zeros(&[d]),
                ln1: ln("ln1"),
                w1: randn(&[d, config.d_ff]),
                b1: Value::zeros(&[config.d_ff]),
                w2: randn(&[config.d_ff, d]),
                b2: Value::zeros(&[d]),
                ln2: ln("ln2"),
            })
            .collect();
        let cls_w = randn(&[d, config.n_classes]);
        let cls_b = Value::zeros(&[config.n_classes]);
        Ok(Model {
            config,
            params: Params {
                tok_emb,
                pos_emb,
                emb_ln: ln("emb"),
                layers,
                cls_w,
                cls_b,
            },
            frozen_embeddings: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Excludes (or re-includes) the token and position embedding *tables*
    /// from the trainable set. Gradients with respect to the embedding
    /// output still flow — the tables just stop receiving updates.
    pub fn set_embeddings_frozen(&mut self, frozen: bool) {
        self.frozen_embeddings = frozen;
    }

    pub fn embeddings_frozen(&self) -> bool {
        self.frozen_embeddings
    }

    /// Visits every parameter in a fixed, documented order.
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Value)) {
        let p = &self.params;
        f("tok_emb", &p.tok_emb);
        f("pos_emb", &p.pos_emb);
        f("emb_ln.gamma", &p.emb_ln.gamma);
        f("emb_ln.beta", &p.emb_ln.beta);
        for (i, l) in p.layers.iter().enumerate() {
            let mut g = |suffix: &str, v: &Value| f(&format!("layer{i}.{suffix}"), v);
            g("wq", &l.wq);
            g("bq", &l.bq);
            g("wk", &l.wk);
            g("bk", &l.bk);
            g("wv", &l.wv);
            g("bv", &l.bv);
            g("wo", &l.wo);
            g("bo", &l.bo);
            g("ln1.gamma", &l.ln1.gamma);
            g("ln1.beta", &l.ln1.beta);
            g("w1", &l.w1);
            g("b1", &l.b1);
            g("w2", &l.w2);
            g("b2", &l.b2);
            g("ln2.gamma", &l.ln2.gamma);
            g("ln2.beta", &l.ln2.beta);
        }
        f("cls.w", &p.cls_w);
        f("cls.b", &p.cls_b);
    }

    /// Mutable twin of [`Model::visit_params`]; must keep the same order
    /// (a test pins the two orders together).
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Value)) {
        let p = &mut self.params;
        f("tok_emb", &mut p.tok_emb);
        f("pos_emb", &mut p.pos_emb);
        f("emb_ln.gamma", &mut p.emb_ln.gamma);
        f("emb_ln.beta", &mut p.emb_ln.beta);
        for (i, l) in p.layers.iter_mut().enumerate() {
            let mut g = |suffix: &str, v: &mut Value| f(&format!("layer{i}.{suffix}"), v);
            g("wq", &mut l.wq);
            g("bq", &mut l.bq);
            g("wk", &mut l.wk);
            g("bk", &mut l.bk);
            g("wv", &mut l.wv);
            g("bv", &mut l.bv);
            g("wo", &mut l.wo);
            g("bo", &mut l.bo);
            g("ln1.gamma", &mut l.ln1.gamma);
            g("ln1.beta", &mut l.ln1.beta);
            g("w1", &mut l.w1);
            g("b1", &mut l.b1);
            g("w2", &mut l.w2);
            g("b2", &mut l.b2);
            g("ln2.gamma", &mut l.ln2.gamma);
            g("ln2.beta", &mut l.ln2.beta);
        }
        f("cls.w", &mut p.cls_w);
        f("cls.b", &mut p.cls_b);
    }

    /// Parameter names in visit order.
    pub fn param_order(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    /// Which visit-order slots the optimizer may update; embedding tables
    /// drop out when frozen.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        self.visit_params(&mut |n, _| {
            mask.push(!(self.frozen_embeddings && (n == "tok_emb" || n == "pos_emb")));
        });
        mask
    }

    /// Plants every parameter as a gradient-carrying leaf on `g`.
    pub fn bind(&self, g: &Graph) -> BoundModel {
        let leaf = |v: &Value| g.leaf(v.clone(), true);
        let ln = |l: &LnParams| BoundLn { gamma: leaf(&l.gamma), beta: leaf(&l.beta) };
        BoundModel {
            graph: g.clone(),
            config: self.config.clone(),
            tok_emb: leaf(&self.params.tok_emb),
            pos_emb: leaf(&self.params.pos_emb),
            emb_ln: ln(&self.params.emb_ln),
            layers: self
                .params
                .layers
                .iter()
                .map(|l| BoundLayer {
                    wq: leaf(&l.wq),
                    bq: leaf(&l.bq),
                    wk: leaf(&l.wk),
                    bk: leaf(&l.bk),
                    wv: leaf(&l.wv),
                    bv: leaf(&l.bv),
                    wo: leaf(&l.wo),
                    bo: leaf(&l.bo),
                    ln1: ln(&l.ln1),
                    w1: leaf(&l.w1),
                    b1: leaf(&l.b1),
                    w2: leaf(&l.w2),
                    b2: leaf(&l.b2),
                    ln2: ln(&l.ln2),
                })
                .collect(),
            cls_w: leaf(&self.params.cls_w),
            cls_b: leaf(&self.params.cls_b),
        }
    }

    /// One-shot evaluation forward: fresh non-recording graph, dropout off.
    pub fn forward_eval(&self, batch: &Batch) -> Result<ModelOutputs> {
        let g = Graph::eval();
        self.bind(&g).forward(batch, &mut DropoutState::inactive())
    }
}

/// Initializes a student from a teacher: embedding tables, embedding layer
/// norm, the *first* `student.n_layers` transformer blocks, and the
/// classifier head are copied; the student must be no deeper than the
/// teacher and match it in every width-like dimension. With equal depth
/// this is an exact copy.
pub fn init_student_from_teacher(student: &ModelConfig, teacher: &Model) -> Result<Model> {
    student.validate()?;
    let t = &teacher.config;
    let same = [
        (student.vocab_size, t.vocab_size, "vocab_size"),
        (student.max_len, t.max_len, "max_len"),
        (student.d_model, t.d_model, "d_model"),
        (student.n_heads, t.n_heads, "n_heads"),
        (student.d_ff, t.d_ff, "d_ff"),
        (student.n_classes, t.n_classes, "n_classes"),
    ];
    for (s, tv, name) in same {
        if s != tv {
            return Err(Error::Config(format!(
                "student {name} {s} must match teacher's {tv}"
            )));
        }
    }
    if student.n_layers > t.n_layers {
        return Err(Error::Config(format!(
            "student depth {} exceeds teacher depth {}",
            student.n_layers, t.n_layers
        )));
    }
    let params = Params {
        tok_emb: teacher.params.tok_emb.clone(),
        pos_emb: teacher.params.pos_emb.clone(),
        emb_ln: teacher.params.emb_ln.clone(),
        layers: teacher.params.layers[..student.n_layers].to_vec(),
        cls_w: teacher.params.cls_w.clone(),
        cls_b: teacher.params.cls_b.clone(),
    };
    Ok(Model { config: student.clone(), params, frozen_embeddings: false })
}

// ── Bound model and forward ──────────────────────────────────────────────

struct BoundLn {
    gamma: Tensor,
    beta: Tensor,
}

struct BoundLayer {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln1: BoundLn,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    ln2: BoundLn,
}

/// A model whose parameters live as leaves on one graph; gradients for a
/// training step are read back per leaf after `backward`.
pub struct BoundModel {
    graph: Graph,
    config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    emb_ln: BoundLn,
    layers: Vec<BoundLayer>,
    cls_w: Tensor,
    cls_b: Tensor,
}

/// Everything a forward pass exposes for losses, metrics, and alignment
/// targets. All tensors stay attached to the pass's graph (when recording),
/// including the interior `input_embeddings` and per-layer `cls_hidden`.
pub struct ModelOutputs {
    /// `[batch, n_classes]` pre-softmax scores.
    pub logits: Tensor,
    /// `[batch, n_classes]` softmax probabilities.
    pub probs: Tensor,
    /// `[batch]` each row's largest probability.
    pub max_prob: Tensor,
    /// `[batch, seq, d_model]` token+position embeddings of the sentence
    /// positions (the `[CLS]` slot is not part of this tensor).
    pub input_embeddings: Tensor,
    /// Per block, the `[batch, d_model]` state of the `[CLS]` position.
    pub cls_hidden: Vec<Tensor>,
}

impl ModelOutputs {
    /// Argmax class per row.
    pub fn predictions(&self) -> Vec<usize> {
        let (_, argmax) = value::max_last(self.probs.value()).expect("probs rows non-empty");
        argmax
    }
}

impl BoundModel {
    /// Parameter leaves in the model's visit order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("emb_ln.gamma".into(), &self.emb_ln.gamma),
            ("emb_ln.beta".into(), &self.emb_ln.beta),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln1.gamma", &l.ln1.gamma),
                ("ln1.beta", &l.ln1.beta),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
                ("ln2.gamma", &l.ln2.gamma),
                ("ln2.beta", &l.ln2.beta),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("cls.w".into(), &self.cls_w));
        out.push(("cls.b".into(), &self.cls_b));
        out
    }

    /// Full forward pass; dropout is consulted at the three standard sites
    /// (after the embedding norm, after attention output, after the FFN).
    pub fn forward(&self, batch: &Batch, dropout: &mut DropoutState) -> Result<ModelOutputs> {
        self.forward_impl(batch, dropout, None)
    }

    /// Forward pass with the sentence embeddings replaced by `e`
    /// (`[batch, seq, d_model]`): the sensitivity probe used to check
    /// embedding gradients against finite differences.
    pub fn forward_with_embedding_override(
        &self,
        batch: &Batch,
        dropout: &mut DropoutState,
        e: &Value,
    ) -> Result<ModelOutputs> {
        self.forward_impl(batch, dropout, Some(e))
    }

    fn linear(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let g = &self.graph;
        g.add(&g.matmul(x, w)?, b)
    }

    fn layer_norm(&self, x: &Tensor, ln: &BoundLn) -> Result<Tensor> {
        let g = &self.graph;
        let d = *x.shape().last().expect("layer_norm input has axes") as f64;
        let mean = g.div(&g.sum_last_keepdim(x)?, &g.scalar(d))?;
        let centered = g.sub(x, &mean)?;
        let var = g.div(&g.sum_last_keepdim(&g.square(&centered)?)?, &g.scalar(d))?;
        let std = g.sqrt(&g.add(&var, &g.scalar(LN_EPS))?)?;
        let normed = g.div(&centered, &std)?;
        g.add(&g.mul(&normed, &ln.gamma)?, &ln.beta)
    }

    fn forward_impl(
        &self,
        batch: &Batch,
        dropout: &mut DropoutState,
        e_override: Option<&Value>,
    ) -> Result<ModelOutputs> {
        let cfg = &self.config;
        batch.validate_against(cfg)?;
        let g = &self.graph;
        let (b, s, d) = (batch.batch, batch.seq, cfg.d_model);

        let e = match e_override {
            Some(v) => {
                if v.shape() != [b, s, d] {
                    return Err(Error::ShapeMismatch {
                        op: "embedding_override",
                        detail: format!("expected [{b}, {s}, {d}], got {:?}", v.shape()),
                    });
                }
                g.leaf(v.clone(), true)
            }
            None => {
                let tok = g.index_select(&self.tok_emb, 0, &batch.tokens)?;
                let tok = g.reshape(&tok, &[b, s, d])?;
                let pos_ids: Vec<usize> = (1..=s).collect();
                let pos = g.index_select(&self.pos_emb, 0, &pos_ids)?;
                g.add(&tok, &pos)?
            }
        };

        // Learned [CLS] slot at position 0, shared across the batch.
        let cls_tok = g.index_select(&self.tok_emb, 0, &[CLS_ID])?;
        let cls_pos = g.index_select(&self.pos_emb, 0, &[0])?;
        let cls_row = g.reshape(&g.add(&cls_tok, &cls_pos)?, &[1, 1, d])?;
        let cls_rows = g.broadcast_to(&cls_row, &[b, 1, d])?;

        let x = g.concat(&[&cls_rows, &e], 1)?;
        let x = self.layer_norm(&x, &self.emb_ln)?;
        let mut x = apply_dropout(g, &x, dropout)?;

        let seq_total = s + 1;
        let mask = g.constant(attention_mask(batch));
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = g.scalar((dh as f64).sqrt());
        let split = |t: &Tensor| -> Result<Tensor> {
            g.permute(&g.reshape(t, &[b, seq_total, heads, dh])?, &[0, 2, 1, 3])
        };

        let mut cls_hidden = Vec::with_capacity(cfg.n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let q = split(&self.linear(&x, &layer.wq, &layer.bq)?)?;
            let k = split(&self.linear(&x, &layer.wk, &layer.bk)?)?;
            let v = split(&self.linear(&x, &layer.wv, &layer.bv)?)?;
            let scores = g.div(&g.matmul(&q, &g.transpose_last2(&k)?)?, &scale)?;
            let attn = g.softmax_last(&g.add(&scores, &mask)?)?;
            let ctx = g.matmul(&attn, &v)?;
            let merged = g.reshape(&g.permute(&ctx, &[0, 2, 1, 3])?, &[b, seq_total, d])?;
            let out = self.linear(&merged, &layer.wo, &layer.bo)?;
            let out = apply_dropout(g, &out, dropout)?;
            let x1 = self.layer_norm(&g.add(&x, &out)?, &layer.ln1)?;

            let hidden = g.gelu(&self.linear(&x1, &layer.w1, &layer.b1)?)?;
            let ffn = self.linear(&hidden, &layer.w2, &layer.b2)?;
            let ffn = apply_dropout(g, &ffn, dropout)?;
            x = self.layer_norm(&g.add(&x1, &ffn)?, &layer.ln2)?;

            let cls = g.reshape(&g.index_select(&x, 1, &[0])?, &[b, d])?;
            if li + 1 < self.layers.len() {
                // Route the [CLS] row of the residual stream through the
                // captured tensor (an exact identity), so the adjoint at
                // this node *is* d(output)/d(cls state) — without this the
                // capture would be a spectator view with zero gradient.
                let cls_back = g.reshape(&cls, &[b, 1, d])?;
                let rest_ids: Vec<usize> = (1..seq_total).collect();
                let rest = g.index_select(&x, 1, &rest_ids)?;
                x = g.concat(&[&cls_back, &rest], 1)?;
            }
            cls_hidden.push(cls);
        }

        let pooled = cls_hidden.last().expect("n_layers >= 1").clone();
        let logits = self.linear(&pooled, &self.cls_w, &self.cls_b)?;
        let probs = g.softmax_last(&logits)?;
        let max_prob = g.max_last(&probs)?;
        Ok(ModelOutputs { logits, probs, max_prob, input_embeddings: e, cls_hidden })
    }
}

/// `[batch, 1, 1, seq+1]` additive mask: 0 on the `[CLS]` slot and real
/// tokens, `MASK_NEG` on padding keys.
fn attention_mask(batch: &Batch) -> Value {
    let st = batch.seq + 1;
    let mut mask = Value::zeros(&[batch.batch, 1, 1, st]);
    for (i, &len) in batch.lengths.iter().enumerate() {
        for j in len + 1..st {
            mask.data_mut()[i * st + j] = MASK_NEG;
        }
    }
    mask
}
