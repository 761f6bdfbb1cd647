//! Two-stage hyperparameter grid search.
//!
//! Stage 1 always sweeps the blend weight α and temperature τ under
//! `vanilla_kd`, whatever the final method is. Stage 2 freezes the winners
//! and sweeps the method's own knob: β for `bert_pkd` and `gkd`, γ for
//! `gkd_cls` (with β pinned). Ties go to the lexicographically smallest
//! hyperparameter tuple, so reruns are stable.
//!
//! Runs are independent — each builds its own graphs and RNG streams from
//! the shared base seed — and execute concurrently on the worker pool when
//! the `parallel` feature is on. A run that errors is recorded in its row
//! and skipped for ranking rather than aborting the sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::Model;
use crate::parallel;

use super::train::distill;
use super::{ExperimentConfig, Method};

// ── Grid specification ───────────────────────────────────────────────────

/// Which values each stage sweeps. `stage2` is β or γ depending on the
/// method; `fixed_beta` only matters for `gkd_cls`, whose stage 2 varies γ
/// while holding β at this value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    pub stage2: Vec<f64>,
    pub fixed_beta: f64,
}

impl GridSpec {
    /// The standard sweep for each method: stage 1 over
    /// α ∈ {0.2, 0.5, 0.7} × τ ∈ {5, 10, 20}, then β ∈ {10, 100, 500, 1000}
    /// for `bert_pkd`, β ∈ {0.05, 0.1, 0.2, 0.4} for `gkd`, or
    /// γ ∈ {0.02, 0.05, 0.1, 0.2} with β = 500 for `gkd_cls`.
    pub fn defaults(method: Method) -> Result<GridSpec> {
        let stage2 = match method {
            Method::Finetune => {
                return Err(Error::Config(
                    "finetune has no distillation hyperparameters to search".into(),
                ))
            }
            Method::VanillaKd => Vec::new(),
            Method::BertPkd => vec![10.0, 100.0, 500.0, 1000.0],
            Method::Gkd => vec![0.05, 0.1, 0.2, 0.4],
            Method::GkdCls => vec![0.02, 0.05, 0.1, 0.2],
        };
        Ok(GridSpec {
            alphas: vec![0.2, 0.5, 0.7],
            taus: vec![5.0, 10.0, 20.0],
            stage2,
            fixed_beta: 500.0,
        })
    }

    pub fn validate(&self, method: Method) -> Result<()> {
        if method == Method::Finetune {
            return Err(Error::Config(
                "finetune has no distillation hyperparameters to search".into(),
            ));
        }
        if self.alphas.is_empty() || self.taus.is_empty() {
            return Err(Error::Config("stage 1 needs at least one alpha and one tau".into()));
        }
        for &a in &self.alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
            }
        }
        for &t in &self.taus {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("temperature {t} must be positive")));
            }
        }
        match method {
            Method::VanillaKd => {
                if !self.stage2.is_empty() {
                    return Err(Error::Config(
                        "vanilla_kd has no stage-2 hyperparameter; leave stage2 empty".into(),
                    ));
                }
            }
            _ => {
                if self.stage2.is_empty() {
                    return Err(Error::Config(format!(
                        "{method} needs stage-2 values to sweep"
                    )));
                }
                for &v in &self.stage2 {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::Config(format!("stage-2 value {v} must be nonnegative")));
                    }
                }
            }
        }
        if !(self.fixed_beta.is_finite() && self.fixed_beta >= 0.0) {
            return Err(Error::Config(format!("fixed_beta {} must be nonnegative", self.fixed_beta)));
        }
        Ok(())
    }
}

// ── Results ──────────────────────────────────────────────────────────────

/// One row of the sweep: the full hyperparameter tuple it trained with and
/// what came out. A failed run keeps its tuple and carries the error text.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridRun {
    pub stage: usize,
    pub method: Method,
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The whole sweep: every run in execution order plus the winning weights
/// by final-epoch validation accuracy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridOutcome {
    pub method: Method,
    pub runs: Vec<GridRun>,
    pub best_weights: LossWeights,
    pub best_val_accuracy: f64,
}

// ── Search ───────────────────────────────────────────────────────────────

fn weight_tuple(w: &LossWeights) -> [f64; 4] {
    [w.alpha, w.tau, w.beta, w.gamma]
}

/// Is `candidate` strictly better: higher accuracy, or equal accuracy with
/// a lexicographically smaller hyperparameter tuple?
fn improves(candidate: (f64, &LossWeights), incumbent: (f64, &LossWeights)) -> bool {
    if candidate.0 != incumbent.0 {
        return candidate.0 > incumbent.0;
    }
    let (c, i) = (weight_tuple(candidate.1), weight_tuple(incumbent.1));
    for (a, b) in c.iter().zip(&i) {
        if a != b {
            return a < b;
        }
    }
    false
}

/// Trains every weight setting in `list` (concurrently when enabled) and
/// reports one row each. A run that errors keeps its row with the error
/// text — crate-visible so tests can exercise that path directly, since
/// `grid_search` validates its inputs too early to produce one.
pub(crate) fn run_set(
    base: &ExperimentConfig,
    teacher: &Model,
    method: Method,
    list: &[LossWeights],
    stage: usize,
) -> Vec<GridRun> {
    let configs: Vec<ExperimentConfig> = list
        .iter()
        .map(|w| {
            let mut c = base.clone();
            c.method = method;
            c.weights = *w;
            c
        })
        .collect();
    parallel::map_indices(configs.len(), |i| {
        let config = &configs[i];
        let w = config.weights;
        let mut run = GridRun {
            stage,
            method,
            alpha: w.alpha,
            tau: w.tau,
            beta: w.beta,
            gamma: w.gamma,
            val_accuracy: None,
            test_accuracy: None,
            error: None,
        };
        match distill(config, teacher) {
            Ok((_, result)) => {
                run.val_accuracy = result.epochs.last().map(|e| e.val_accuracy);
                run.test_accuracy = Some(result.test_accuracy);
            }
            Err(e) => run.error = Some(e.to_string()),
        }
        run
    })
}

/// Picks the best completed run; errors if every run in the set failed.
fn best_of<'a>(runs: &[GridRun], weights: &'a [LossWeights], what: &str) -> Result<(&'a LossWeights, f64)> {
    let mut best: Option<(f64, &LossWeights)> = None;
    for (run, w) in runs.iter().zip(weights) {
        let Some(acc) = run.val_accuracy else { continue };
        if best.is_none_or(|incumbent| improves((acc, w), incumbent)) {
            best = Some((acc, w));
        }
    }
    match best {
        Some((acc, w)) => Ok((w, acc)),
        None => Err(Error::Config(format!("every {what} run failed; nothing to rank"))),
    }
}

/// Runs the two-stage protocol for `base.method` and returns every row
/// plus the winner. The base config's own α/τ/β/γ are ignored; the grid
/// dictates them.
pub fn grid_search(base: &ExperimentConfig, teacher: &Model, spec: &GridSpec) -> Result<GridOutcome> {
    base.validate()?;
    spec.validate(base.method)?;

    // Stage 1: α × τ under vanilla_kd, α-major so row order mirrors the
    // lexicographic tie-break.
    let stage1: Vec<LossWeights> = spec
        .alphas
        .iter()
        .flat_map(|&alpha| {
            spec.taus.iter().map(move |&tau| LossWeights { alpha, tau, beta: 0.0, gamma: 0.0 })
        })
        .collect();
    let mut runs = run_set(base, teacher, Method::VanillaKd, &stage1, 1);
    let (stage1_best, stage1_acc) = best_of(&runs, &stage1, "stage-1")?;
    let (best_alpha, best_tau) = (stage1_best.alpha, stage1_best.tau);

    if base.method == Method::VanillaKd {
        return Ok(GridOutcome {
            method: base.method,
            runs,
            best_weights: *stage1_best,
            best_val_accuracy: stage1_acc,
        });
    }

    // Stage 2: the method's own knob with the stage-1 winners pinned.
    let stage2: Vec<LossWeights> = spec
        .stage2
        .iter()
        .map(|&v| match base.method {
            Method::GkdCls => {
                LossWeights { alpha: best_alpha, tau: best_tau, beta: spec.fixed_beta, gamma: v }
            }
            _ => LossWeights { alpha: best_alpha, tau: best_tau, beta: v, gamma: 0.0 },
        })
        .collect();
    let stage2_runs = run_set(base, teacher, base.method, &stage2, 2);
    let (stage2_best, stage2_acc) = best_of(&stage2_runs, &stage2, "stage-2")?;
    let best_weights = *stage2_best;
    runs.extend(stage2_runs);

    Ok(GridOutcome { method: base.method, runs, best_weights, best_val_accuracy: stage2_acc })
}
